"""
Robust RTF estimation on a learned manifold.

Noisy GEVD estimates of the relative transfer functions (RTFs) of a
microphone array are projected onto the manifold spanned by clean RTFs of
the same room, using a per-microphone KNN graph and a message-passing
network with weights shared across microphones. The refined RTFs steer an
MVDR beamformer.

Modules:
    signal_core: FFT, STFT/ISTFT, convolution, generators, SNR mixing, WAV I/O
    linalg_hermitian: Cholesky, Hermitian EVD, top generalized eigenpair
    room_sim: image-source AIRs and scene rendering
    rtf_estimation: covariances, GEVD/EVD RTFs, time-domain features, NPM
    manifold_graph: KNN graphs, query attachment, leave-one-out graphs
    autodiff: reverse-mode tape
    gcn: message-passing network, training, inference, checkpoints
    beamformer: MVDR weights, beamforming, shadow filtering
    metrics: SNR, SI-SDR, SBF, STOI/ESTOI
    objectives: differentiable training losses
    container: binary tensor container
    config: run configuration
    pipeline: simulate / estimate / train / eval / report stages
    cli: command line entry point
"""

__version__ = "0.1.0"
