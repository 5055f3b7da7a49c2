"""
Pipeline stages: simulate -> estimate -> train -> eval -> report, plus compare.

Each stage reads only what earlier stages persisted under cfg.out_dir:

    scene_t<ms>.bgtc                 AIRs, dry excitations, speech intervals, geometry
    features_t<ms>.bgtc              clean / ground-truth / noisy features, splits,
                                     mixture recipes, KNN adjacency of the bank
    checkpoints/<mode>_<loss>_t<ms>_{best,last}.bgtc
    train_log_<mode>_<loss>_t<ms>.csv
    eval_examples_t<ms>.csv          per-example metrics
    report_t<ms>.csv, report.csv     mean / std / n per (method, t60, snr_in, metric)
    series_<metric>.csv              plot-ready curves
    checks.csv                       knn_rtfs against gevd and self_rtfs at the focus condition
    objectives_t<ms>.csv, objective_checks_t<ms>.csv
                                     knn models trained per objective and seed (compare stage)
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from rtfgraph.beamformer import mvdr_weights, reference_selector, shadow_filter
from rtfgraph.config import GRAPH_MODES, RunConfig, t60_tag
from rtfgraph.container import read_container, write_container
from rtfgraph.errors import ConfigError
from rtfgraph.gcn import GcnParams, ResumeState, TrainingExample, infer, load_checkpoint, save_checkpoint, train
from rtfgraph.manifold_graph import (FeatureBank, ManifoldGraph, attach_query, build_knn_graph, leave_one_out,
                                     self_attachment)
from rtfgraph.metrics import metric_table, sbf
from rtfgraph.objectives import ObjectiveExample, evaluate_objective, training_loss
from rtfgraph.room_sim import build_scene, compute_airs, render_airs, sabine_reflectivity
from rtfgraph.rtf_estimation import (CovariancePair, air_ratio_spectrum, estimate_covariances, estimate_rtf_clean,
                                     estimate_rtf_gevd, features_to_spectra, label_frames, npm,
                                     spectra_to_features, truncation_energy_capture)
from rtfgraph.signal_core import (MultichannelSignal, Signal, TFGrid, derive_rng, gen_pink_noise, gen_speech_like,
                                  istft_array, mix_at_snr, stft, wav_write)

logger = logging.getLogger(__name__)

SPLITS = {"train": 0, "validation": 1, "test": 2}
VALIDATION_OBJECTIVE = "sisdr2"
MIN_TRUNCATION_CAPTURE = 0.95
# checkpoint settings that must match for a run to resume
RESUME_KEYS = ("mode", "loss", "seed", "neighbors", "l_uncausal", "epochs", "batch_size", "learning_rate",
               "warmup_ratio")


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def scene_path(cfg: RunConfig, t60: float) -> Path:
    return _out(cfg) / f"scene_{t60_tag(t60)}.bgtc"


def features_path(cfg: RunConfig, t60: float) -> Path:
    return _out(cfg) / f"features_{t60_tag(t60)}.bgtc"


def checkpoint_path(cfg: RunConfig, t60: float, mode: str, loss: str, which: str = "best") -> Path:
    return _out(cfg) / "checkpoints" / f"{mode}_{loss}_{t60_tag(t60)}_{which}.bgtc"


def train_log_path(cfg: RunConfig, t60: float, mode: str, loss: str) -> Path:
    return _out(cfg) / f"train_log_{mode}_{loss}_{t60_tag(t60)}.csv"


def _parallel_map(fn: Callable, items: Sequence, threads: int, desc: str, progress: bool) -> List:
    """Map in a thread pool; results come back in input order."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        return list(tqdm(executor.map(fn, items), total=len(items), desc=desc, disable=not progress))


def mask_to_intervals(mask: np.ndarray) -> np.ndarray:
    """[start, stop) sample intervals (B, 2) of the nonzero runs of a mask."""
    edges = np.diff(np.concatenate([[0], (np.asarray(mask) != 0).astype(np.int8), [0]]))
    return np.stack([np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)], axis=1).astype(np.int64)


def intervals_to_mask(intervals: np.ndarray, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=np.uint8)
    for start, stop in intervals:
        mask[start:stop] = 1
    return mask


@dataclass
class SceneData:
    """Contents of a scene container."""

    airs: np.ndarray
    oog_airs: np.ndarray
    excitation: np.ndarray
    intervals: np.ndarray
    meta: dict

    @property
    def num_positions(self) -> int:
        return self.airs.shape[0]

    @property
    def num_mics(self) -> int:
        return self.airs.shape[1]

    @property
    def ref_index(self) -> int:
        return int(self.meta["ref_index"])

    @property
    def sample_rate(self) -> int:
        return int(self.meta["sample_rate"])

    def clean_image(self, position: int) -> MultichannelSignal:
        dry = Signal(self.excitation[position], self.sample_rate)
        return render_airs(self.airs[position], dry, self.ref_index)

    def activity(self, position: int) -> np.ndarray:
        rows = self.intervals[self.intervals[:, 0] == position, 1:]
        return intervals_to_mask(rows, self.excitation.shape[1])


@dataclass(frozen=True)
class Recipe:
    """How one noisy mixture is rendered."""

    index: int
    position: int
    split: int
    draw: int
    oog: int
    snr: float
    noise_seed: int
    noise_scale: float = float("nan")

    @property
    def name(self) -> str:
        return f"pos{self.position}_snr{self.snr:+.1f}_draw{self.draw}"


@dataclass
class FeatureData:
    """Contents of a features container."""

    clean_features: np.ndarray
    truth_features: np.ndarray
    noisy_features: np.ndarray
    split_ids: Dict[str, np.ndarray]
    recipes: List[Recipe]
    graph: ManifoldGraph
    meta: dict

    def bank(self) -> FeatureBank:
        ids = self.split_ids["train"]
        return FeatureBank(self.clean_features[ids], ids)

    def recipes_of(self, split: str) -> List[Recipe]:
        return [recipe for recipe in self.recipes if recipe.split == SPLITS[split]]


@dataclass
class Mixture:
    """A rendered noisy example and its analysis."""

    image: MultichannelSignal
    noise: MultichannelSignal
    grid: TFGrid
    labels: np.ndarray
    cov: CovariancePair
    noise_scale: float


def stored_graph(cfg: RunConfig, feats: FeatureData) -> ManifoldGraph:
    """KNN graph saved by the estimate stage.

    Raises:
        ConfigError: If the configured K differs from the one the features were built with
    """
    if feats.graph.k != cfg.neighbors:
        raise ConfigError(f"Features were built with neighbors={feats.graph.k} but the configuration asks for"
                          f" {cfg.neighbors}; rerun the estimate stage")
    return feats.graph


def load_scene(cfg: RunConfig, t60: float) -> SceneData:
    arrays, meta = read_container(scene_path(cfg, t60))
    return SceneData(airs=arrays["airs"], oog_airs=arrays["oog_airs"],
                     excitation=arrays["excitation"].astype(np.float64), intervals=arrays["speech_intervals"],
                     meta=meta)


def load_features(cfg: RunConfig, t60: float) -> FeatureData:
    arrays, meta = read_container(features_path(cfg, t60))
    recipes = [
        Recipe(index=i, position=int(arrays["recipe_position"][i]), split=int(arrays["recipe_split"][i]),
               draw=int(arrays["recipe_draw"][i]), oog=int(arrays["recipe_oog"][i]),
               snr=float(arrays["recipe_snr"][i]), noise_seed=int(arrays["recipe_noise_seed"][i]),
               noise_scale=float(arrays["recipe_noise_scale"][i]))
        for i in range(arrays["recipe_position"].shape[0])
    ]
    return FeatureData(
        clean_features=arrays["clean_features"],
        truth_features=arrays["truth_features"],
        noisy_features=arrays["noisy_features"],
        split_ids={split: arrays[f"{split}_ids"] for split in SPLITS},
        recipes=recipes,
        graph=ManifoldGraph(arrays["graph_neighbors"].astype(np.int64), arrays["graph_distances"],
                            int(meta["neighbors"])),
        meta=meta,
    )


def render_mixture(cfg: RunConfig, scene: SceneData, recipe: Recipe) -> Mixture:
    """Clean image plus OOG pink noise at the recipe's SNR.

    The stored noise scale is reused when the recipe carries one; otherwise
    it is measured on the speech-active samples of the reference channel.
    """
    image = scene.clean_image(recipe.position)
    n = scene.excitation.shape[1]
    noise = render_airs(scene.oog_airs[recipe.oog], gen_pink_noise(n, recipe.noise_seed, scene.sample_rate),
                        scene.ref_index)
    activity = scene.activity(recipe.position)
    if np.isnan(recipe.noise_scale):
        padded = np.zeros(len(image), dtype=np.uint8)
        padded[:n] = activity
        _, scale = mix_at_snr(image, noise, recipe.snr, padded)
    else:
        scale = recipe.noise_scale
    noise = MultichannelSignal(scale * noise.data, noise.sample_rate, noise.ref_index)
    mixture = MultichannelSignal(image.data + noise.data, image.sample_rate, image.ref_index)
    grid = stft(mixture, cfg.stft)
    labels = label_frames(activity, cfg.stft, len(mixture))
    return Mixture(image=image, noise=noise, grid=grid, labels=labels,
                   cov=estimate_covariances(grid, labels), noise_scale=scale)


def build_objective_example(cfg: RunConfig, scene: SceneData, feats: FeatureData, recipe: Recipe) -> ObjectiveExample:
    mix = render_mixture(cfg, scene, recipe)
    ref = scene.ref_index
    clean_grid = stft(mix.image, cfg.stft)
    return ObjectiveExample.build(
        noisy=mix.grid.data,
        phi_vv=mix.cov.phi_vv,
        config=cfg.stft,
        ref_index=ref,
        l_uncausal=cfg.features.l_uncausal,
        oracle_features=feats.clean_features[recipe.position],
        clean_ref=istft_array(clean_grid.data[:, :, ref:ref + 1], cfg.stft)[0],
        sbf_source=mix.image.data[ref],
        rate=scene.sample_rate,
    )


class ExampleCache:
    """Objective examples built on demand; the first `capacity` are kept in memory."""

    def __init__(self, cfg: RunConfig, scene: SceneData, feats: FeatureData, capacity: int):
        self.cfg, self.scene, self.feats = cfg, scene, feats
        self.capacity = capacity
        self._items: Dict[int, ObjectiveExample] = {}

    def get(self, recipe: Recipe) -> ObjectiveExample:
        example = self._items.get(recipe.index)
        if example is None:
            example = build_objective_example(self.cfg, self.scene, self.feats, recipe)
            if len(self._items) < self.capacity:
                self._items[recipe.index] = example
        return example


def cmd_simulate(cfg: RunConfig, t60: float) -> Path:
    """Synthesize AIRs and dry excitations for every grid and OOG position.

    Returns:
        Path: The written scene container
    """
    room = cfg.room_for(t60)
    scene = build_scene(cfg.scene, room)
    beta = sabine_reflectivity(room)
    logger.info(f"Simulating T60={t60:.2f} s: reflectivity {beta:.4f}, {scene.num_positions} positions")
    airs = compute_airs(scene, cfg.air_len, threads=cfg.threads, progress=cfg.progress)
    oog_airs = compute_airs(scene, cfg.air_len, oog=True, threads=cfg.threads, progress=cfg.progress)

    excitations, intervals = [], []
    for position in range(scene.num_positions):
        seed = int(derive_rng(cfg.seed, "excitation", position).integers(2**31))
        dry, mask = gen_speech_like(cfg.num_samples, seed, room.sample_rate)
        excitations.append(dry.samples.astype(np.float32))
        for start, stop in mask_to_intervals(mask):
            intervals.append((position, start, stop))

    arrays = {
        "airs": airs,
        "oog_airs": oog_airs,
        "positions": scene.positions,
        "mics": scene.mics,
        "oog_positions": scene.oog,
        "excitation": np.stack(excitations),
        "speech_intervals": np.asarray(intervals, dtype=np.int64).reshape(-1, 3),
    }
    meta = {
        "t60": t60,
        "reflectivity": beta,
        "sample_rate": room.sample_rate,
        "air_len": cfg.air_len,
        "ref_index": scene.ref_index,
        "seed": cfg.seed,
        "num_positions": scene.num_positions,
        "grid_counts": list(cfg.scene.grid_counts),
        "num_samples": cfg.num_samples,
    }
    path = scene_path(cfg, t60)
    write_container(path, arrays, meta)
    logger.info(f"Wrote {path}")
    return path


def split_positions(cfg: RunConfig, num_positions: int) -> Dict[str, np.ndarray]:
    """Seeded disjoint train / validation / test position ids covering the grid."""
    order = derive_rng(cfg.seed, "split").permutation(num_positions)
    n_train, n_val = cfg.splits.train, cfg.splits.validation
    return {
        "train": np.sort(order[:n_train]).astype(np.int64),
        "validation": np.sort(order[n_train:n_train + n_val]).astype(np.int64),
        "test": np.sort(order[n_train + n_val:]).astype(np.int64),
    }


def plan_recipes(cfg: RunConfig, splits: Dict[str, np.ndarray], num_oog: int) -> List[Recipe]:
    """Training / validation draws get a uniform random SNR; test positions sweep the SNR grid."""
    low, high = min(cfg.snr_grid), max(cfg.snr_grid)
    recipes = []

    def add(position, split, draw, snr, rng):
        recipes.append(Recipe(index=len(recipes), position=int(position), split=SPLITS[split], draw=draw,
                              oog=int(rng.integers(num_oog)), snr=float(snr), noise_seed=int(rng.integers(2**31))))

    for split in ("train", "validation"):
        for position in splits[split]:
            for draw in range(cfg.noise_draws):
                rng = derive_rng(cfg.seed, "recipe", int(position), draw)
                add(position, split, draw, rng.uniform(low, high), rng)
    for position in splits["test"]:
        for snr_index, snr in enumerate(cfg.snr_grid):
            for draw in range(cfg.test_draws):
                add(position, "test", draw, snr, derive_rng(cfg.seed, "recipe", int(position), "test", snr_index, draw))
    return recipes


def cmd_estimate(cfg: RunConfig, t60: float) -> Path:
    """Clean (EVD) features for every position, noisy (GEVD) features for every recipe.

    Returns:
        Path: The written features container
    """
    scene = load_scene(cfg, t60)
    fc = cfg.features
    bins = cfg.stft.bins
    ref = scene.ref_index

    def clean_position(position):
        image = scene.clean_image(position)
        labels = label_frames(scene.activity(position), cfg.stft, len(image))
        h = estimate_rtf_clean(stft(image, cfg.stft), labels, ref)
        truth = air_ratio_spectrum(scene.airs[position], ref, bins)
        return (spectra_to_features(h.h, ref, fc.l_uncausal, fc.l_causal),
                spectra_to_features(truth.h, ref, fc.l_uncausal, fc.l_causal),
                truncation_energy_capture(truth, fc.l_uncausal, fc.l_causal))

    positions = list(range(scene.num_positions))
    clean = _parallel_map(clean_position, positions, cfg.threads, "clean RTFs", cfg.progress)
    clean_features = np.stack([item[0] for item in clean])
    truth_features = np.stack([item[1] for item in clean])
    capture = np.array([item[2] for item in clean])
    clean_npm = np.array([npm(c, t)[1] for c, t in zip(clean_features, truth_features)])
    logger.info(f"Clean RTF NPM vs ground truth: median {np.median(clean_npm):.2f} dB")
    logger.info(f"Truncation energy capture: min {capture.min():.4f}, median {np.median(capture):.4f}")
    if capture.min() < MIN_TRUNCATION_CAPTURE:
        logger.warning(f"{int(np.sum(capture < MIN_TRUNCATION_CAPTURE))} positions keep less than "
                       f"{MIN_TRUNCATION_CAPTURE:.0%} of the RTF energy inside the feature window")

    splits = split_positions(cfg, scene.num_positions)
    recipes = plan_recipes(cfg, splits, scene.oog_airs.shape[0])

    def noisy_recipe(recipe):
        mix = render_mixture(cfg, scene, recipe)
        h = estimate_rtf_gevd(mix.cov, ref)
        return spectra_to_features(h.h, ref, fc.l_uncausal, fc.l_causal), mix.noise_scale

    noisy = _parallel_map(noisy_recipe, recipes, cfg.threads, "noisy RTFs", cfg.progress)
    noisy_features = np.stack([item[0] for item in noisy])
    scales = np.array([item[1] for item in noisy])

    tests = [r for r in recipes if r.split == SPLITS["test"]]
    for snr in cfg.snr_grid:
        values = [npm(noisy_features[r.index], truth_features[r.position])[1] for r in tests if r.snr == snr]
        logger.info(f"Noisy RTF NPM at {snr:+.0f} dB input SNR: median {np.median(values):.2f} dB")

    bank = FeatureBank(clean_features[splits["train"]], splits["train"])
    graph = build_knn_graph(bank, cfg.neighbors)

    arrays = {
        "clean_features": clean_features,
        "truth_features": truth_features,
        "truncation_capture": capture,
        "noisy_features": noisy_features,
        "graph_neighbors": graph.neighbors,
        "graph_distances": graph.distances,
        "recipe_position": np.array([r.position for r in recipes], dtype=np.int64),
        "recipe_split": np.array([r.split for r in recipes], dtype=np.int64),
        "recipe_draw": np.array([r.draw for r in recipes], dtype=np.int64),
        "recipe_oog": np.array([r.oog for r in recipes], dtype=np.int64),
        "recipe_snr": np.array([r.snr for r in recipes], dtype=np.float64),
        "recipe_noise_seed": np.array([r.noise_seed for r in recipes], dtype=np.int64),
        "recipe_noise_scale": scales,
    }
    arrays.update({f"{split}_ids": ids for split, ids in splits.items()})
    meta = {
        "t60": t60,
        "d": fc.d,
        "l_uncausal": fc.l_uncausal,
        "l_causal": fc.l_causal,
        "K": bins,
        "M": scene.num_mics,
        "ref_index": ref,
        "neighbors": cfg.neighbors,
        "seed": cfg.seed,
    }
    path = features_path(cfg, t60)
    write_container(path, arrays, meta)
    logger.info(f"Wrote {path}: bank {bank.features.shape}, {len(recipes)} noisy examples")
    return path


def query_for(mode: str, feats: FeatureData, bank: FeatureBank, recipe: Recipe, k: int, graph=None):
    """Attach a recipe's noisy features: self loop, leave-one-out (training) or plain KNN."""
    noisy = feats.noisy_features[recipe.index]
    if mode == "self":
        return self_attachment(noisy)
    if recipe.split == SPLITS["train"]:
        return leave_one_out(bank, recipe.position, noisy, k)
    return attach_query(graph, bank, noisy, k)


def cmd_train(cfg: RunConfig, t60: float, mode: str = "knn", loss: Optional[str] = None,
              resume: bool = False) -> Dict[str, Path]:
    """Train the network for one graph mode and objective.

    Both checkpoints are rewritten after every epoch, so an interrupted run
    can continue from its last checkpoint with resume=True and end with the
    same weights as an uninterrupted one.

    Returns:
        dict: Paths of the best and last checkpoints and the training log

    Raises:
        ConfigError: If the checkpoints to resume from were trained with other settings
    """
    if mode not in ("knn", "self"):
        raise ValueError(f"Unknown graph mode {mode!r}")
    loss = loss or cfg.train.loss
    train_cfg = cfg.train.model_copy(update={"loss": loss})
    scene = load_scene(cfg, t60)
    feats = load_features(cfg, t60)
    bank = feats.bank()
    graph = stored_graph(cfg, feats) if mode == "knn" else None
    cache = ExampleCache(cfg, scene, feats, cfg.example_cache)

    examples = [TrainingExample(r.name, query_for(mode, feats, bank, r, cfg.neighbors, graph), r)
                for r in feats.recipes_of("train")]
    validation = [(query_for(mode, feats, bank, r, cfg.neighbors, graph), r) for r in feats.recipes_of("validation")]
    objective_loss = training_loss(loss)

    def loss_fn(tape, output, recipe):
        return objective_loss(tape, output, cache.get(recipe))

    def validate(params: GcnParams) -> float:
        values = [evaluate_objective(VALIDATION_OBJECTIVE, infer(params, query), cache.get(recipe)).value
                  for query, recipe in validation]
        return float(np.mean(values))

    meta = {"K": cfg.stft.bins, "M": scene.num_mics, "loss": loss, "seed": train_cfg.seed, "mode": mode, "t60": t60,
            "neighbors": cfg.neighbors, "l_uncausal": cfg.features.l_uncausal, "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size, "learning_rate": train_cfg.learning_rate,
            "warmup_ratio": train_cfg.warmup_ratio, "validation_objective": VALIDATION_OBJECTIVE}
    best = checkpoint_path(cfg, t60, mode, loss, "best")
    last = checkpoint_path(cfg, t60, mode, loss, "last")
    state = _resume_state(meta, last, best) if resume else None

    def save_progress(progress: ResumeState):
        epoch_meta = {**meta, "schedule_step": progress.step}
        if progress.best_epoch == progress.next_epoch - 1:
            save_checkpoint(best, progress.best, {**epoch_meta, "epoch": progress.best_epoch})
        save_checkpoint(last, progress.params, {**epoch_meta, **progress.progress_meta()}, progress.optimizer())

    logger.info(f"Training {mode} model on {len(examples)} examples, objective {loss}, T60={t60:.2f} s")
    params = GcnParams.init(bank.d, train_cfg.seed)
    result = train(params, examples, loss_fn, train_cfg, validate, progress=cfg.progress, resume=state,
                   on_epoch=save_progress)

    log_path = train_log_path(cfg, t60, mode, loss)
    result.log.to_csv(log_path, index=False)
    logger.info(f"Best validation epoch {result.best_epoch + 1}; log written to {log_path}")
    return {"best": best, "last": last, "log": log_path}


def _resume_state(meta: dict, last: Path, best: Path) -> ResumeState:
    last_checkpoint = load_checkpoint(last)
    changed = [key for key in RESUME_KEYS if last_checkpoint.meta.get(key) != meta[key]]
    if changed:
        raise ConfigError(f"Cannot resume from {last}: settings {changed} differ from the configuration")
    state = ResumeState.from_checkpoints(last_checkpoint, load_checkpoint(best))
    logger.info(f"Resuming from {last} after epoch {state.next_epoch}")
    return state


def _load_method_params(cfg: RunConfig, t60: float, checkpoints: Dict[str, Path], d: int) -> Dict[str, GcnParams]:
    params = {}
    for method in cfg.methods:
        mode = GRAPH_MODES.get(method)
        if mode is None:
            continue
        path = checkpoints.get(mode) or checkpoint_path(cfg, t60, mode, cfg.train.loss, "best")
        checkpoint = load_checkpoint(path)
        if checkpoint.params.d != d:
            raise ValueError(f"Checkpoint {path} has d={checkpoint.params.d}, features have d={d}")
        params[method] = checkpoint.params
        logger.info(f"{method}: loaded {path} (epoch {checkpoint.meta['epoch']})")
    return params


def method_features(method: str, feats: FeatureData, recipe: Recipe, params: Dict[str, GcnParams],
                    bank: FeatureBank, graph, k: int) -> Optional[np.ndarray]:
    """RTF features steering each method's MVDR; None for the unprocessed reference mic."""
    if method == "unprocessed":
        return None
    if method == "gevd":
        return feats.noisy_features[recipe.index]
    if method == "oracle":
        return feats.clean_features[recipe.position]
    mode = GRAPH_MODES[method]
    return infer(params[method], query_for(mode, feats, bank, recipe, k, graph))


def cmd_eval(cfg: RunConfig, t60: float, checkpoints: Optional[Dict[str, Path]] = None) -> Path:
    """Beamform every test mixture with every method and score it.

    Returns:
        Path: The per-T60 report table
    """
    examples = evaluate_examples(cfg, t60, checkpoints)
    tag = t60_tag(t60)
    examples_path = _out(cfg) / f"eval_examples_{tag}.csv"
    examples.to_csv(examples_path, index=False)

    table = report_table(examples, cfg.metrics, cfg.methods)
    path = _out(cfg) / f"report_{tag}.csv"
    table.to_csv(path, index=False)
    logger.info(f"Evaluated {len(examples) // len(cfg.methods)} test mixtures x {len(cfg.methods)} methods;"
                f" wrote {path}")
    return path


def evaluate_examples(cfg: RunConfig, t60: float, checkpoints: Optional[Dict[str, Path]] = None) -> pd.DataFrame:
    """Per-example metrics of every configured method on the test mixtures."""
    scene = load_scene(cfg, t60)
    feats = load_features(cfg, t60)
    bank = feats.bank()
    graph = stored_graph(cfg, feats)
    params = _load_method_params(cfg, t60, checkpoints or {}, bank.d)
    ref, bins, m = scene.ref_index, cfg.stft.bins, scene.num_mics
    wav_dir = _out(cfg) / "wav" / t60_tag(t60)
    tests = feats.recipes_of("test")

    def evaluate(item):
        ordinal, recipe = item
        mix = render_mixture(cfg, scene, recipe)
        clean_grid = stft(mix.image, cfg.stft)
        noise_grid = stft(mix.noise, cfg.stft)
        s_ref = istft_array(clean_grid.data[:, :, ref:ref + 1], cfg.stft)[0]
        dump = cfg.dump_wav and ordinal < cfg.dump_wav_examples
        if dump:
            stem = wav_dir / recipe.name
            wav_write(f"{stem}_reference.wav", Signal(s_ref, scene.sample_rate))
            wav_write(f"{stem}_noisy.wav", Signal(mix.image.data[ref] + mix.noise.data[ref], scene.sample_rate))

        rows = []
        for method in cfg.methods:
            features = method_features(method, feats, recipe, params, bank, graph, cfg.neighbors)
            row = {"t60": t60, "position": recipe.position, "draw": recipe.draw, "snr_in": recipe.snr, "method": method}
            if features is None:
                weights = reference_selector(bins, m, ref)
            else:
                h = features_to_spectra(features, ref, bins, cfg.features.l_uncausal)
                weights = mvdr_weights(h, mix.cov.phi_vv, ref)
                ok = ~weights.degenerate
                gain = np.sum(weights.w.conj() * h, axis=1)
                row["distortion"] = float(np.max(np.abs(gain[ok] - 1.0))) if ok.any() else 0.0
            s_hat, v_hat = shadow_filter(weights, clean_grid, noise_grid)
            row.update(metric_table(s_ref, s_hat, v_hat, scene.sample_rate))
            if features is None:
                row["sbf"], row["npm"] = np.nan, np.nan
            else:
                row["sbf"] = sbf(feats.clean_features[recipe.position], features, mix.image.data[ref])
                row["npm"] = npm(features, feats.truth_features[recipe.position])[1]
            if method == "oracle" and row["distortion"] > 1e-10:
                logger.warning(f"Oracle MVDR distortion {row['distortion']:.2e} on {recipe.name}")
            if dump:
                wav_write(f"{wav_dir / recipe.name}_{method}.wav",
                          Signal(s_hat.samples + v_hat.samples, scene.sample_rate))
            rows.append(row)
        return rows

    results = _parallel_map(evaluate, list(enumerate(tests)), cfg.threads, "evaluation", cfg.progress)
    columns = ["t60", "position", "draw", "snr_in", "method", "distortion"] + list(cfg.metrics)
    return pd.DataFrame([row for rows in results for row in rows]).reindex(columns=columns)


def _population_std(values: pd.Series) -> float:
    values = values.dropna()
    return float(np.std(values.to_numpy())) if len(values) else float("nan")


def report_table(examples: pd.DataFrame, metrics: Iterable[str], methods: Iterable[str]) -> pd.DataFrame:
    """Long-format table (method, t60, snr_in, metric, mean, std, n) in a stable order."""
    metrics, methods = list(metrics), list(methods)
    long = examples.melt(id_vars=["method", "t60", "snr_in"], value_vars=metrics, var_name="metric")
    long["method"] = pd.Categorical(long["method"], categories=methods, ordered=True)
    long["metric"] = pd.Categorical(long["metric"], categories=metrics, ordered=True)
    table = (long.groupby(["method", "t60", "snr_in", "metric"], observed=True, sort=True)["value"]
             .agg(mean="mean", std=_population_std, n="count")
             .reset_index())
    table["method"] = table["method"].astype(str)
    table["metric"] = table["metric"].astype(str)
    return table


def cmd_report(cfg: RunConfig, focus_t60: float = 0.6, focus_snr: float = -10.0) -> Path:
    """Merge per-T60 tables into report.csv and write the plot-ready series.

    Returns:
        Path: report.csv
    """
    frames = []
    for t60 in cfg.t60s:
        path = _out(cfg) / f"report_{t60_tag(t60)}.csv"
        if path.exists():
            frames.append(pd.read_csv(path))
        else:
            logger.warning(f"No evaluation table for T60={t60:.2f} s ({path})")
    if not frames:
        raise FileNotFoundError(f"No report_t*.csv tables under {_out(cfg)}; run the eval stage first")

    report = pd.concat(frames, ignore_index=True)
    method_order = {method: i for i, method in enumerate(cfg.methods)}
    metric_order = {metric: i for i, metric in enumerate(cfg.metrics)}
    report = report[report["method"].isin(method_order) & report["metric"].isin(metric_order)]
    report = (report.assign(_method=report["method"].map(method_order), _metric=report["metric"].map(metric_order))
              .sort_values(["_method", "t60", "snr_in", "_metric"], kind="mergesort")
              .drop(columns=["_method", "_metric"])
              .reset_index(drop=True))
    path = _out(cfg) / "report.csv"
    report.to_csv(path, index=False)

    for metric in cfg.metrics:
        series = report[report["metric"] == metric].pivot(index=["t60", "snr_in"], columns="method", values="mean")
        series = series.reindex(columns=[m for m in cfg.methods if m in series.columns])
        series.to_csv(_out(cfg) / f"series_{metric}.csv")

    focus = report[np.isclose(report["t60"], focus_t60) & np.isclose(report["snr_in"], focus_snr)]
    if not focus.empty:
        summary = focus.pivot(index="method", columns="metric", values="mean")
        summary = summary.reindex(index=[m for m in cfg.methods if m in summary.index],
                                  columns=[m for m in cfg.metrics if m in summary.columns])
        logger.info(f"T60={focus_t60:.1f} s, input SNR {focus_snr:+.0f} dB:\n{summary.to_string(float_format='%.3f')}")
        checks = direction_checks(focus, NEIGHBOR_CHECKS)
        if not checks.empty:
            checks.insert(0, "snr_in", focus_snr)
            checks.insert(0, "t60", focus_t60)
            checks.to_csv(_out(cfg) / "checks.csv", index=False)
            _log_checks(checks, "method")
    logger.info(f"Wrote {path} ({len(report)} rows)")
    return path


@dataclass(frozen=True)
class DirectionCheck:
    """lhs scores at least margin above rhs on a metric (strictly above when strict)."""

    lhs: str
    rhs: str
    metric: str
    margin: float = 0.0
    strict: bool = False

    def holds(self, lhs_mean: float, rhs_mean: float) -> bool:
        gap = lhs_mean - rhs_mean
        return bool(gap > self.margin if self.strict else gap >= self.margin)


# graph-refined steering against plain GEVD and against the self-loop ablation
NEIGHBOR_CHECKS = (
    DirectionCheck("knn_rtfs", "gevd", "snr_out", margin=1.0),
    DirectionCheck("knn_rtfs", "gevd", "stoi", margin=0.02),
    DirectionCheck("knn_rtfs", "self_rtfs", "snr_out", strict=True),
)
# knn models trained with different objectives
COMPARED_LOSSES = ("sisdr1", "sbf", "stoi")
OBJECTIVE_CHECKS = (
    DirectionCheck("sisdr1", "sbf", "si_sdr"),
    DirectionCheck("sisdr1", "stoi", "si_sdr"),
    DirectionCheck("stoi", "sisdr1", "stoi"),
)
CHECK_COLUMNS = ["lhs", "rhs", "metric", "lhs_mean", "rhs_mean", "margin", "passed"]


def direction_checks(means: pd.DataFrame, checks: Iterable[DirectionCheck], key: str = "method") -> pd.DataFrame:
    """Evaluate checks against a table with columns (key, metric, mean).

    Checks with a missing or non-finite side are skipped.
    """
    lookup = {(row[key], row["metric"]): float(row["mean"]) for row in means.to_dict("records")}
    rows = []
    for check in checks:
        lhs, rhs = lookup.get((check.lhs, check.metric)), lookup.get((check.rhs, check.metric))
        if lhs is None or rhs is None or not np.isfinite(lhs) or not np.isfinite(rhs):
            continue
        rows.append({"lhs": check.lhs, "rhs": check.rhs, "metric": check.metric, "lhs_mean": lhs, "rhs_mean": rhs,
                     "margin": check.margin, "passed": check.holds(lhs, rhs)})
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def seed_majority(checks: pd.DataFrame, num_seeds: int) -> pd.DataFrame:
    """Collapse per-seed checks: a check passes when it holds for at least two thirds of the seeds."""
    needed = math.ceil(2 * num_seeds / 3)
    summary = (checks.groupby(["lhs", "rhs", "metric"], sort=False)["passed"]
               .sum()
               .astype(int)
               .rename("seeds_passed")
               .reset_index())
    summary["seeds"] = num_seeds
    summary["passed"] = summary["seeds_passed"] >= needed
    return summary


def _log_checks(checks: pd.DataFrame, what: str):
    for row in checks.to_dict("records"):
        text = f"{what} {row['lhs']} vs {row['rhs']} on {row['metric']}"
        if row["passed"]:
            logger.info(f"Direction holds: {text}")
        else:
            logger.warning(f"Direction does not hold: {text}")


def cmd_compare(cfg: RunConfig, t60: float, losses: Sequence[str] = COMPARED_LOSSES,
                seeds: Optional[Sequence[int]] = None) -> Path:
    """Train the knn model once per objective and seed and compare their test scores.

    Writes objectives_t<ms>.csv (seed, loss, metric, mean over the test split)
    and objective_checks_t<ms>.csv. The knn checkpoints of each loss are left
    from the last seed.

    Returns:
        Path: The objective checks table

    Raises:
        ConfigError: If no seeds are given
    """
    seeds = list(cfg.compare_seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("Objective comparison needs at least one seed")
    eval_cfg = cfg.model_copy(update={"methods": ["knn_rtfs"]})
    metrics = [metric for metric in ("si_sdr", "stoi") if metric in cfg.metrics]
    rows, per_seed = [], []
    for seed in seeds:
        seed_cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
        seed_rows = []
        for loss in losses:
            best = cmd_train(seed_cfg, t60, "knn", loss)["best"]
            examples = evaluate_examples(eval_cfg, t60, {"knn": best})
            seed_rows += [{"seed": seed, "loss": loss, "metric": metric, "mean": float(examples[metric].mean())}
                          for metric in metrics]
        rows += seed_rows
        per_seed.append(direction_checks(pd.DataFrame(seed_rows), OBJECTIVE_CHECKS, key="loss").assign(seed=seed))

    tag = t60_tag(t60)
    pd.DataFrame(rows, columns=["seed", "loss", "metric", "mean"]).to_csv(_out(cfg) / f"objectives_{tag}.csv",
                                                                           index=False)
    summary = seed_majority(pd.concat(per_seed, ignore_index=True), len(seeds))
    path = _out(cfg) / f"objective_checks_{tag}.csv"
    summary.to_csv(path, index=False)
    _log_checks(summary, "objective")
    return path


def run_all(cfg: RunConfig, checkpoints: Optional[Dict[str, Path]] = None) -> Path:
    for t60 in cfg.t60s:
        cmd_simulate(cfg, t60)
        cmd_estimate(cfg, t60)
        trained = dict(checkpoints or {})
        for mode in cfg.graph_modes:
            if any(GRAPH_MODES.get(method) == mode for method in cfg.methods):
                trained.setdefault(mode, cmd_train(cfg, t60, mode)["best"])
        cmd_eval(cfg, t60, trained)
    return cmd_report(cfg)
