#!/usr/bin/env python
"""
Run the graph-refined RTF / MVDR pipeline on simulated rooms.

Stages: simulate (AIRs and dry excitations), estimate (clean and noisy RTF
features), train (message-passing network, knn and self-loop modes), eval
(MVDR with every method, all metrics) and report (merged tables and curves).

Usage:
    python run_pipeline.py --config configs/desk_scale.json
    python run_pipeline.py --config configs/desk_scale.json --stage train --t60 0.6 --loss sisdr1
    python run_pipeline.py --stage eval --t60 0.6 --checkpoint runs/desk_scale/checkpoints/knn_sisdr2_t600_best.bgtc
    python run_pipeline.py --print-schema

Environment variables (a .env file is read):
    RTFGRAPH_OUT_DIR, RTFGRAPH_THREADS, RTFGRAPH_SEED, RTFGRAPH_LOG_LEVEL
"""

import sys

from rtfgraph.cli import main

if __name__ == "__main__":
    sys.exit(main())
