"""Experiment harness: JSON configuration, cached pipeline stages, the
end-to-end comparisons (traversal benchmark, classification, KDE class
morphing, dimension sweep, orthogonality probe), and the CLI.

Artifacts are cached per stage under a hash of the configuration fields
that stage depends on, so reruns and sweeps skip completed work unless
--force is given. Commands are deterministic under a fixed config.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import analysis, binio, contrastive, diffusion, dynsim, lifting, metrics, traversal
from .errors import ConfigError, FormatError, InputError, NumericError
from .numcore import Rng

CSV_HEADER = "dataset,space,method,metric,value,std,n,seed"
THREADS_ENV = "CONDA_DYN_THREADS"


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DatasetConfig:
    name: str = "oscillator"
    n_traj: int = 240
    frames_per_traj: int = 64
    mu_range: tuple = (0.2, 1.0)
    state_dim: int = 12
    test_fraction: float = 1.0 / 6.0
    t_max: float = 0.75
    nonlin_amp: float = 0.1
    zeta_max: float = 0.8


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: tuple = (256, 256, 256, 256)
    epochs: int = 60
    batch: int = 128
    lr: float = 1e-3
    steps: int = 100          # strided steps for inversion and sampling
    condition_on: tuple = ("tau",)   # ("tau",) or ("tau", "mu")


@dataclass
class EmbeddingConfig:
    d: int = 8
    tau: float = 1.0
    delta_t: Optional[float] = None   # None -> two-frame window
    delta_y: Optional[float] = None
    use_condition: bool = False
    class_match: bool = False
    cross_trajectory_time: bool = False
    hidden: tuple = (128, 128, 128)
    epochs: int = 200
    lr: float = 1e-3
    traj_per_batch: int = 16
    window: int = 8
    val_fraction: float = 0.1
    patience: int = 10
    min_improve: float = 1e-4


@dataclass
class TraversalConfig:
    lam: float = 0.0
    keyframe_stride: int = 16  # spacing of the anchor frames linear methods see
    tex_window: int = 5        # dense trailing window for the Taylor stencils
    context: int = 8           # dense trailing window for the recurrent baseline
    target_stride: int = 2
    render_targets_per_traj: int = 3
    spline_in_z: bool = False
    include_pca: bool = True
    recurrent_hidden: int = 64
    recurrent_epochs: int = 120
    recurrent_lr: float = 1e-3


@dataclass
class LiftingConfig:
    kernel: str = "gaussian"
    metric: str = "euclidean"
    k_grid: tuple = (1, 2, 3, 5, 8, 12)
    sigma: Optional[float] = None
    holdout_fraction: float = 0.1


@dataclass
class AnalysisConfig:
    svm_lam: float = 1e-4
    svm_steps: int = 60_000
    svm_gamma: Optional[float] = None
    svm_max_points: int = 2000
    folds: int = 4
    frames_per_traj_class: int = 16
    kde_d: int = 3
    kde_bandwidth: Optional[float] = None
    kde_nodes: Optional[int] = None
    kde_frames_per_class: int = 400


@dataclass
class ExperimentConfig:
    seed: int = 0
    render_grid: int = 32
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    traversal: TraversalConfig = field(default_factory=TraversalConfig)
    lifting: LiftingConfig = field(default_factory=LiftingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


_SECTIONS = {
    "dataset": DatasetConfig,
    "diffusion": DiffusionConfig,
    "embedding": EmbeddingConfig,
    "traversal": TraversalConfig,
    "lifting": LiftingConfig,
    "analysis": AnalysisConfig,
}


def config_from_dict(doc):
    """Build an ExperimentConfig, rejecting unknown fields with their path."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in doc.items():
        if key in ("seed", "render_grid"):
            setattr(cfg, key, int(value))
        elif key in _SECTIONS:
            section = getattr(cfg, key)
            if not isinstance(value, dict):
                raise ConfigError("section must be a JSON object", field=key)
            for name, item in value.items():
                if not hasattr(section, name):
                    raise ConfigError("unknown field", field=f"{key}.{name}")
                current = getattr(section, name)
                if isinstance(current, tuple) or (current is None and isinstance(item, list)):
                    item = tuple(item) if isinstance(item, list) else item
                setattr(section, name, item)
        else:
            raise ConfigError("unknown field", field=key)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    d = cfg.dataset
    if len(d.mu_range) != 2 or not (d.mu_range[0] <= d.mu_range[1]):
        raise ConfigError(f"invalid interval {d.mu_range}", field="dataset.mu_range")
    if d.n_traj < 2:
        raise ConfigError("need at least 2 trajectories", field="dataset.n_traj")
    if d.frames_per_traj < 8:
        raise ConfigError("need at least 8 frames", field="dataset.frames_per_traj")
    if cfg.diffusion.steps > cfg.diffusion.T:
        raise ConfigError("steps cannot exceed T", field="diffusion.steps")
    if tuple(cfg.diffusion.condition_on) not in (("tau",), ("tau", "mu")):
        raise ConfigError("must be ['tau'] or ['tau', 'mu']",
                          field="diffusion.condition_on")
    if cfg.render_grid < 8:
        raise ConfigError("render grid must be at least 8", field="render_grid")
    return cfg


def config_to_dict(cfg):
    out = dataclasses.asdict(cfg)

    def fix(v):
        if isinstance(v, tuple):
            return [fix(x) for x in v]
        if isinstance(v, list):
            return [fix(x) for x in v]
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        return v

    return fix(out)


def canonical_config_text(cfg):
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def _hash_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def config_hash(cfg):
    return _hash_text(canonical_config_text(cfg))


def config_schema():
    """Schema document: every field with its default value."""
    cfg = ExperimentConfig()
    doc = config_to_dict(cfg)
    return {
        "description": "JSON configuration; every field optional, defaults below",
        "defaults": doc,
    }


def load_config(path=None, seed=None):
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = config_from_dict(doc)
    if seed is not None:
        cfg.seed = int(seed)
    return validate_config(cfg)


def worker_count():
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Artifact plumbing


def _stage_hash(*parts):
    return _hash_text("|".join(json.dumps(p, sort_keys=True, default=str) for p in parts))


def _dataset_key(cfg):
    return _stage_hash("dataset", cfg.seed, dataclasses.asdict(cfg.dataset))


def _diffusion_key(cfg):
    return _stage_hash(_dataset_key(cfg), dataclasses.asdict(cfg.diffusion))


def _latents_key(cfg):
    return _stage_hash(_diffusion_key(cfg), cfg.diffusion.steps)


def _encoder_key(cfg, emb):
    return _stage_hash(_latents_key(cfg), dataclasses.asdict(emb))


LATENTS_MAGIC = b"LAT1"


class Workspace:
    """Output directory with stage-hashed caching."""

    def __init__(self, out_dir, cfg, force=False):
        self.out = out_dir
        self.cfg = cfg
        self.force = force
        self.cache = os.path.join(out_dir, "cache")
        self.run_dir = os.path.join(out_dir, config_hash(cfg))
        os.makedirs(self.cache, exist_ok=True)
        os.makedirs(self.run_dir, exist_ok=True)
        self.timings = {}
        self.artifacts = []

    def path(self, stage, key, ext="bin"):
        return os.path.join(self.cache, f"{stage}-{key}.{ext}")

    def stage(self, name, key, writer, reader):
        """Run or reuse one cached stage; returns the loaded artifact."""
        path = self.path(name, key)
        if not self.force and os.path.exists(path):
            self.artifacts.append(path)
            return reader(path)
        start = time.perf_counter()
        writer(path)
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start
        self.artifacts.append(path)
        return reader(path)

    def manifest(self, command, summary):
        doc = {
            "command": command,
            "config_hash": config_hash(self.cfg),
            "config": config_to_dict(self.cfg),
            "artifacts": sorted(set(self.artifacts)),
            "stage_seconds": {k: round(v, 3) for k, v in self.timings.items()},
            "metrics_summary": summary,
        }
        path = os.path.join(self.run_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return path


def stage_dataset(ws):
    cfg = ws.cfg

    def write(path):
        d = cfg.dataset
        ds = dynsim.generate_oscillator(
            d.n_traj, d.frames_per_traj, d.mu_range, D=d.state_dim,
            seed=cfg.seed, test_fraction=d.test_fraction, t_max=d.t_max,
            nonlin_amp=d.nonlin_amp, zeta_max=d.zeta_max,
        )
        dynsim.save_dataset(ds, path)

    return ws.stage("dataset", _dataset_key(cfg), write, dynsim.load_dataset)


def stage_diffusion(ws, ds):
    cfg = ws.cfg

    def write(path):
        dc = cfg.diffusion
        sched = diffusion.make_schedule(dc.T, dc.beta_start, dc.beta_end)
        rng = Rng(cfg.seed).stream("diffusion")
        model = diffusion.DenoiserModel(
            cfg.dataset.state_dim, dc.T, hidden=tuple(dc.hidden),
            rng=rng.stream("init"), cond_components=len(dc.condition_on),
        )
        diffusion.train(model, ds, sched, dc.epochs, dc.batch, rng.stream("train"), lr=dc.lr)
        diffusion.save_model(model, sched, path)

    return ws.stage("diffusion", _diffusion_key(cfg), write, diffusion.load_model)


def stage_latents(ws, ds, model, sched):
    """DDIM-invert every frame of every trajectory; (n_traj, S, D) array."""
    cfg = ws.cfg

    def write(path):
        n_traj = len(ds.trajectories)
        S = len(ds.trajectories[0])
        D = ds.state_dim
        xs = np.concatenate([t.xs for t in ds.trajectories])
        taus = np.concatenate([t.taus for t in ds.trajectories])
        mus = np.concatenate([np.full(len(t), t.mu) for t in ds.trajectories])
        conds = diffusion.condition_columns(taus, mus, model.cond_components)
        z = diffusion.ddim_invert(model, xs, conds, sched, cfg.diffusion.steps)
        binio.write_envelope(path, LATENTS_MAGIC, {"steps": cfg.diffusion.steps},
                             {"z": z.reshape(n_traj, S, D)})

    def read(path):
        _, arrays = binio.read_envelope(path, LATENTS_MAGIC)
        return arrays["z"]

    return ws.stage("latents", _latents_key(cfg), write, read)


def _flatten(ds, z_all, split):
    idx = ds.indices(split)
    data = ds.stack(split)
    data["z"] = np.concatenate([z_all[i] for i in idx])
    return data


def stage_encoder(ws, ds, z_all, emb_cfg, tag="encoder"):
    cfg = ws.cfg

    def write(path):
        train = _flatten(ds, z_all, "train")
        enc = contrastive.EncoderModel(
            ds.state_dim, emb_cfg.d, hidden=tuple(emb_cfg.hidden),
            use_condition=emb_cfg.use_condition,
            rng=Rng(cfg.seed).stream(f"{tag}-init"),
        )
        tc = contrastive.EncoderTrainConfig(
            epochs=emb_cfg.epochs, lr=emb_cfg.lr, tau=emb_cfg.tau,
            delta_t=emb_cfg.delta_t, delta_y=emb_cfg.delta_y,
            class_match=emb_cfg.class_match,
            cross_trajectory_time=emb_cfg.cross_trajectory_time,
            traj_per_batch=emb_cfg.traj_per_batch,
            window=emb_cfg.window, val_fraction=emb_cfg.val_fraction,
            patience=emb_cfg.patience, min_improve=emb_cfg.min_improve,
        )
        contrastive.train_encoder(
            enc, train["z"], train["tau"], train["mu"], tc,
            Rng(cfg.seed).stream(f"{tag}-train"),
            labels=train["label"], traj_ids=train["traj"],
        )
        contrastive.save_encoder(enc, path)

    return ws.stage(tag, _encoder_key(cfg, emb_cfg), write, contrastive.load_encoder)


def _embed_all(encoder, z_all, ds):
    n_traj, S, D = z_all.shape
    flat = z_all.reshape(n_traj * S, D)
    if encoder.use_condition:
        conds = np.concatenate(
            [np.stack([t.taus, np.full(len(t), t.mu)], axis=1) for t in ds.trajectories]
        )
        c = contrastive.embed(encoder, flat, conds)
    else:
        c = contrastive.embed(encoder, flat)
    return c.reshape(n_traj, S, encoder.embed_dim)


def stage_table(ws, ds, z_all, encoder, tag="table"):
    cfg = ws.cfg

    def write(path):
        c_all = _embed_all(encoder, z_all, ds)
        train_idx = ds.indices("train")
        n_hold = max(1, int(round(len(train_idx) * cfg.lifting.holdout_fraction)))
        hold_idx = train_idx[-n_hold:]
        ref_idx = train_idx[:-n_hold] or train_idx
        c_ref = np.concatenate([c_all[i] for i in ref_idx])
        z_ref = np.concatenate([z_all[i] for i in ref_idx])
        table = lifting.build_table(
            c_ref, z_ref,
            lifting.LiftConfig(kernel=cfg.lifting.kernel, metric=cfg.lifting.metric,
                               sigma=cfg.lifting.sigma),
        )
        c_hold = np.concatenate([c_all[i] for i in hold_idx])
        z_hold = np.concatenate([z_all[i] for i in hold_idx])
        table.k = lifting.select_k(table, cfg.lifting.k_grid, c_hold, z_hold)
        lifting.save_table(table, path)

    key = _stage_hash(_encoder_key(cfg, cfg.embedding), dataclasses.asdict(cfg.lifting), tag)
    return ws.stage(tag, key, write, lifting.load_table)


# ---------------------------------------------------------------------------
# Output helpers


def format_float(v):
    return repr(float(v))


def write_csv(path, rows):
    lines = [CSV_HEADER]
    for r in rows:
        std = "" if r.get("std") is None else format_float(r["std"])
        lines.append(
            ",".join(
                [
                    r["dataset"],
                    r["space"],
                    r["method"],
                    r["metric"],
                    format_float(r["value"]),
                    std,
                    str(r.get("n", 1)),
                    str(r["seed"]),
                ]
            )
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_pgm(path, image):
    """Binary 8-bit PGM (P5) from a [0, 1] float image."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def hstack_images(images, pad=1):
    """Horizontal strip with a thin white separator."""
    h = images[0].shape[0]
    sep = np.ones((h, pad))
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(img)
    return np.concatenate(parts, axis=1)


def render_states(xs, grid, mapping):
    n_workers = worker_count()
    frames = [xs[i] for i in range(xs.shape[0])]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(lambda x: dynsim.render(x, grid, mapping), frames))
    return [dynsim.render(x, grid, mapping) for x in frames]


# ---------------------------------------------------------------------------
# Traversal benchmark (the Table-1-style comparison)


def _space_vectors(cfg, ds, z_all, encoder):
    """name -> dict(vectors (n_traj, S, dim), renderable, lift function)."""
    spaces = {"Z": {"vectors": z_all, "renderable": True}}
    c_all = _embed_all(encoder, z_all, ds)
    spaces["C"] = {"vectors": c_all, "renderable": True}
    if cfg.traversal.include_pca:
        train_idx = ds.indices("train")
        flat_train = np.concatenate([z_all[i] for i in train_idx])
        pca = analysis.fit_pca(flat_train, encoder.embed_dim)
        n_traj, S, D = z_all.shape
        proj = analysis.pca_project(pca, z_all.reshape(-1, D))
        spaces["PCA"] = {
            "vectors": proj.reshape(n_traj, S, encoder.embed_dim),
            "renderable": False,
        }
    return spaces


def _method_list(space, tcfg):
    methods = ["lerp", "slerp", "recurrent", "tex1", "tex2"]
    if space != "Z" or tcfg.spline_in_z:
        methods.append("spline")
    return methods


def _keyframes(S, stride):
    kf = list(range(0, S, stride))
    if kf[-1] != S - 1:
        kf.append(S - 1)
    return np.array(kf)


def _predict(method, vecs, alphas, s_star, tcfg, recurrent_model, kf):
    """Reconstruct one unobserved frame.

    Linear methods interpolate between the keyframes flanking the target
    (their anchor-to-anchor usage); the smoothing spline imputes the frame
    from every other frame of the trajectory; the Taylor stencils and the
    recurrent baseline work one step ahead from the dense trailing window,
    as local traversal operators do.
    """
    d_alpha = float(alphas[1] - alphas[0])
    if method in ("lerp", "slerp"):
        left = kf[kf < s_star][-1]
        right = kf[kf > s_star][0]
        frac = (alphas[s_star] - alphas[left]) / (alphas[right] - alphas[left])
        if method == "lerp":
            return traversal.lerp(vecs[left], vecs[right], frac)
        try:
            return traversal.slerp(vecs[left], vecs[right], frac)
        except InputError:
            return traversal.lerp(vecs[left], vecs[right], frac)
    if method == "spline":
        observed = np.arange(len(vecs)) != s_star
        curve = traversal.fit_spline(alphas[observed], vecs[observed], tcfg.lam)
        return traversal.spline_traverse(curve, float(alphas[s_star]), 0.0)
    if method in ("tex1", "tex2"):
        window = vecs[s_star - tcfg.tex_window : s_star]
        stencil = traversal.stencil_from_window(window, d_alpha, at=-1)
        return traversal.tex_extrapolate(stencil, 1 if method == "tex1" else 2)
    if method == "recurrent":
        context = vecs[s_star - tcfg.context : s_star]
        return recurrent_model.rollout(context, 1)[0]
    raise ValueError(f"unknown method {method!r}")


def evaluate_traversal(cfg, ds, model, sched, z_all, encoder, table, seed_rng):
    """Fit and score every traversal operator in every space."""
    tcfg = cfg.traversal
    if tcfg.keyframe_stride < 2:
        raise ConfigError("keyframe stride must be at least 2",
                          field="traversal.keyframe_stride")
    spaces = _space_vectors(cfg, ds, z_all, encoder)
    test_idx = ds.indices("test")
    train_idx = ds.indices("train")
    S = z_all.shape[1]
    kf = _keyframes(S, tcfg.keyframe_stride)
    ctx = max(tcfg.tex_window, tcfg.context)
    kf_set = set(kf.tolist())
    targets = [
        s for s in range(ctx, S - 1, tcfg.target_stride) if s not in kf_set
    ]
    if not targets:
        raise ConfigError("no eligible target frames; shrink context or stride",
                          field="traversal.target_stride")
    n_render = min(tcfg.render_targets_per_traj, len(targets))
    render_targets = targets[:: max(1, len(targets) // max(n_render, 1))][:n_render]

    dataset_name = cfg.dataset.name
    rows = []
    strips = {}
    grid = cfg.render_grid

    true_imgs = {}
    for ti in test_idx:
        traj = ds.trajectories[ti]
        for s_star in render_targets:
            true_imgs[(ti, s_star)] = dynsim.render(traj.xs[s_star], grid, ds.mapping)

    for space, info in spaces.items():
        vecs_all = info["vectors"]
        train_vecs = np.concatenate([vecs_all[i] for i in train_idx])
        center = train_vecs.mean(axis=0)
        scale = float(np.sqrt(np.mean((train_vecs - center) ** 2)))
        rows.append(dict(dataset=dataset_name, space=space, method="all",
                         metric="space_scale", value=scale, std=None,
                         n=train_vecs.shape[0], seed=cfg.seed))

        rec = traversal.RecurrentPredictor(
            vecs_all.shape[2], hidden=tcfg.recurrent_hidden,
            rng=seed_rng.stream(f"recurrent-{space}-init"),
        )
        traversal.train_recurrent(
            rec, [vecs_all[i] for i in train_idx], tcfg.recurrent_epochs,
            seed_rng.stream(f"recurrent-{space}-train"), lr=tcfg.recurrent_lr,
        )

        for method in _method_list(space, tcfg):
            preds, truths = [], []
            per_traj_tae = []
            render_preds = {}
            for ti in test_idx:
                vecs = vecs_all[ti]
                alphas = ds.trajectories[ti].alphas
                errs = []
                for s_star in targets:
                    pred = _predict(method, vecs, alphas, s_star, tcfg, rec, kf)
                    preds.append(pred)
                    truths.append(vecs[s_star])
                    errs.append(np.abs(pred - vecs[s_star]).sum())
                    if s_star in render_targets:
                        render_preds[(ti, s_star)] = pred
                per_traj_tae.append(float(np.sum(errs)))
            preds = np.stack(preds)
            truths = np.stack(truths)
            err = metrics.rmse(preds, truths)
            rows.append(dict(dataset=dataset_name, space=space, method=method,
                             metric="rmse", value=err, std=None,
                             n=preds.shape[0], seed=cfg.seed))
            rows.append(dict(dataset=dataset_name, space=space, method=method,
                             metric="rmse_norm", value=err / scale, std=None,
                             n=preds.shape[0], seed=cfg.seed))
            taes = np.array(per_traj_tae)
            rows.append(dict(dataset=dataset_name, space=space, method=method,
                             metric="tae", value=float(taes.mean()),
                             std=float(taes.std()), n=taes.size, seed=cfg.seed))

            if info["renderable"]:
                keys = sorted(render_preds)
                cs = np.stack([render_preds[k] for k in keys])
                if space == "Z":
                    z_hat = cs
                else:
                    z_hat = lifting.lift_many(table, cs)
                conds = diffusion.condition_columns(
                    np.array([ds.trajectories[ti].taus[s] for ti, s in keys]),
                    np.array([ds.trajectories[ti].mu for ti, s in keys]),
                    model.cond_components,
                )
                x_hat = diffusion.ddim_sample(model, z_hat, sched,
                                              cfg.diffusion.steps, cond=conds)
                imgs = render_states(np.atleast_2d(x_hat), grid, ds.mapping)
                ps = [metrics.psnr(img, true_imgs[k], 1.0) for img, k in zip(imgs, keys)]
                ss = [metrics.ssim(img, true_imgs[k], 1.0) for img, k in zip(imgs, keys)]
                rows.append(dict(dataset=dataset_name, space=space, method=method,
                                 metric="psnr", value=float(np.mean(ps)),
                                 std=float(np.std(ps)), n=len(ps), seed=cfg.seed))
                rows.append(dict(dataset=dataset_name, space=space, method=method,
                                 metric="ssim", value=float(np.mean(ss)),
                                 std=float(np.std(ss)), n=len(ss), seed=cfg.seed))
                first = test_idx[0]
                strip = [imgs[i] for i, k in enumerate(keys) if k[0] == first]
                if strip:
                    strips[f"{space}-{method}"] = hstack_images(strip)

        # Geometric alignment: per test trajectory, the best planar view of
        # the space's curve against the true latent cycle.
        disparities = []
        for ti in test_idx:
            pts = vecs_all[ti]
            flat2 = analysis.pca_project(analysis.fit_pca(pts, 2), pts)
            disparities.append(
                metrics.procrustes_distance(flat2, ds.trajectories[ti].ss)
            )
        disparities = np.array(disparities)
        rows.append(dict(dataset=dataset_name, space=space, method="alignment",
                         metric="procrustes", value=float(disparities.mean()),
                         std=float(disparities.std()), n=disparities.size,
                         seed=cfg.seed))

    first = test_idx[0]
    strips["truth"] = hstack_images(
        [true_imgs[(first, s)] for s in render_targets]
    )
    return rows, strips


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg, out_dir, force=False):
    ws = Workspace(out_dir, cfg, force)
    t0 = time.perf_counter()
    ds = stage_dataset(ws)
    ws.timings.setdefault("dataset", time.perf_counter() - t0)
    summary = {
        "n_traj": len(ds.trajectories),
        "n_train": len(ds.indices("train")),
        "n_test": len(ds.indices("test")),
        "state_dim": ds.state_dim,
    }
    manifest = ws.manifest("simulate", summary)
    return {"dataset": ws.path("dataset", _dataset_key(cfg)), "manifest": manifest}


def _pipeline_artifacts(ws):
    ds = stage_dataset(ws)
    model, sched = stage_diffusion(ws, ds)
    z_all = stage_latents(ws, ds, model, sched)
    encoder = stage_encoder(ws, ds, z_all, ws.cfg.embedding)
    table = stage_table(ws, ds, z_all, encoder)
    return ds, model, sched, z_all, encoder, table


def cmd_pipeline(cfg, out_dir, force=False):
    ws = Workspace(out_dir, cfg, force)
    ds, model, sched, z_all, encoder, table = _pipeline_artifacts(ws)
    t0 = time.perf_counter()
    rows, strips = evaluate_traversal(
        cfg, ds, model, sched, z_all, encoder, table, Rng(cfg.seed).stream("traversal")
    )
    ws.timings["evaluate"] = time.perf_counter() - t0
    csv_path = write_csv(os.path.join(ws.run_dir, "pipeline.csv"), rows)
    ws.artifacts.append(csv_path)
    strip_dir = os.path.join(ws.run_dir, "strips")
    os.makedirs(strip_dir, exist_ok=True)
    for name, img in sorted(strips.items()):
        ws.artifacts.append(write_pgm(os.path.join(strip_dir, f"{name}.pgm"), img))
    summary = {
        f"{r['space']}/{r['method']}/{r['metric']}": r["value"]
        for r in rows
        if r["metric"] in ("rmse", "rmse_norm")
    }
    with open(os.path.join(ws.run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    manifest = ws.manifest("pipeline", summary)
    return {"rows": rows, "csv": csv_path, "manifest": manifest, "run_dir": ws.run_dir}


def _band_folds(mus, folds):
    lo, hi = float(np.min(mus)), float(np.max(mus))
    edges = np.linspace(lo, hi, folds + 1)
    edges[-1] = np.inf
    return [(edges[i], edges[i + 1]) for i in range(folds)]


def classification_metrics(cfg, ds, z_all, encoder, seed_rng, labels=None):
    """Leave-mu-band-out CV in Z and C, pooled over folds.

    With a single fold this degenerates to plain train/test evaluation on
    the dataset's own split.
    """
    acfg = cfg.analysis
    n_traj = len(ds.trajectories)
    S = z_all.shape[1]
    stride = max(1, S // acfg.frames_per_traj_class)
    frame_sel = np.arange(0, S, stride)

    mus = np.array([t.mu for t in ds.trajectories])
    if labels is None:
        labels = np.array([t.class_label for t in ds.trajectories])
    c_all = _embed_all(encoder, z_all, ds)
    feats = {
        "Z": z_all[:, frame_sel, :],
        "C": c_all[:, frame_sel, :],
    }

    if acfg.folds <= 1:
        folds = [(np.array(ds.indices("train")), np.array(ds.indices("test")))]
    else:
        folds = []
        for lo, hi in _band_folds(mus, acfg.folds):
            test_traj = np.flatnonzero((mus >= lo) & (mus < hi))
            folds.append((np.setdiff1d(np.arange(n_traj), test_traj), test_traj))

    rows = []
    results = {}
    for space, arr in feats.items():
        for kernel in ("linear", "rbf"):
            pooled_scores, pooled_labels = [], []
            for f, (train_traj, test_traj) in enumerate(folds):
                if test_traj.size == 0 or train_traj.size == 0:
                    continue
                y_train = np.repeat(labels[train_traj], frame_sel.size)
                if np.unique(y_train).size < 2:
                    continue
                x_train = arr[train_traj].reshape(-1, arr.shape[2])
                x_test = arr[test_traj].reshape(-1, arr.shape[2])
                svm_cfg = analysis.SvmConfig(
                    kernel=kernel, lam=acfg.svm_lam, steps=acfg.svm_steps,
                    gamma=acfg.svm_gamma, max_points=acfg.svm_max_points,
                )
                svm = analysis.train_svm(
                    x_train, y_train, svm_cfg,
                    seed_rng.stream(f"svm-{space}-{kernel}-{f}"),
                )
                pooled_scores.append(analysis.svm_decision(svm, x_test))
                pooled_labels.append(np.repeat(labels[test_traj], frame_sel.size))
            scores = np.concatenate(pooled_scores)
            truth = np.concatenate(pooled_labels)
            predicted = (scores > 0.0).astype(np.int64)
            vals = {
                "accuracy": float(np.mean(predicted == truth)),
                "f1": analysis.f1_score(truth, predicted),
                "auc": analysis.roc_auc(truth, scores),
            }
            results[(space, kernel)] = vals
            for metric, value in vals.items():
                rows.append(dict(dataset=cfg.dataset.name, space=space,
                                 method=f"svm-{kernel}", metric=metric,
                                 value=value, std=None, n=truth.size, seed=cfg.seed))
    return rows, results


def cmd_classify(cfg, out_dir, force=False):
    ws = Workspace(out_dir, cfg, force)
    ds = stage_dataset(ws)
    model, sched = stage_diffusion(ws, ds)
    z_all = stage_latents(ws, ds, model, sched)
    emb = dataclasses.replace(cfg.embedding, class_match=True)
    encoder = stage_encoder(ws, ds, z_all, emb, tag="encoder-classify")
    t0 = time.perf_counter()
    rows, results = classification_metrics(
        cfg, ds, z_all, encoder, Rng(cfg.seed).stream("classify")
    )
    ws.timings["classify"] = time.perf_counter() - t0
    csv_path = write_csv(os.path.join(ws.run_dir, "classification.csv"), rows)
    ws.artifacts.append(csv_path)
    summary = {f"{s}/{k}": v for (s, k), v in results.items()}
    manifest = ws.manifest("classify", summary)
    return {"rows": rows, "results": results, "csv": csv_path, "manifest": manifest}


def cmd_kde_edit(cfg, out_dir, eta_list=(0.0, 0.25, 0.5, 0.75, 1.0), force=False):
    ws = Workspace(out_dir, cfg, force)
    ds = stage_dataset(ws)
    model, sched = stage_diffusion(ws, ds)
    z_all = stage_latents(ws, ds, model, sched)
    # Structure-retaining compact embedding (same family as the probe): the
    # peak-to-peak segment then crosses intermediate regimes instead of the
    # empty gap between class-collapsed clusters.
    emb = dataclasses.replace(
        probe_embedding_config(cfg), d=min(cfg.analysis.kde_d, 3)
    )
    encoder = stage_encoder(ws, ds, z_all, emb, tag="encoder-kde")
    table = stage_table(ws, ds, z_all, encoder, tag="table-kde")

    c_all = _embed_all(encoder, z_all, ds)
    train = ds.indices("train")
    labels = np.array([ds.trajectories[i].class_label for i in train])
    c_train = np.stack([c_all[i] for i in train])
    class0 = c_train[labels == 0].reshape(-1, encoder.embed_dim)
    class1 = c_train[labels == 1].reshape(-1, encoder.embed_dim)
    cap = cfg.analysis.kde_frames_per_class
    class0 = class0[:: max(1, class0.shape[0] // cap)]
    class1 = class1[:: max(1, class1.shape[0] // cap)]

    kde = analysis.kde_fit(class0, class1, h=cfg.analysis.kde_bandwidth,
                           nodes=cfg.analysis.kde_nodes)
    if kde.degenerate:
        raise NumericError("class-conditional densities are indistinguishable; "
                           "no traversal direction exists")

    train_flat = _flatten(ds, z_all, "train")
    c_flat = contrastive.embed(encoder, train_flat["z"])

    def peak_condition(point):
        # Mean (tau, mu) of the frames whose embeddings sit nearest the peak.
        near = np.argsort(np.linalg.norm(c_flat - point, axis=1), kind="stable")[:16]
        return float(np.mean(train_flat["tau"][near])), float(np.mean(train_flat["mu"][near]))

    tau0, mu0 = peak_condition(kde.m_class0)
    tau1, mu1 = peak_condition(kde.m_class1)

    frames = []
    rows = []
    for eta in eta_list:
        c_eta = analysis.kde_traverse(kde, float(eta))
        z_eta = lifting.lift(table, c_eta)
        cond = diffusion.condition_columns(
            np.array([(1.0 - eta) * tau0 + eta * tau1]),
            np.array([(1.0 - eta) * mu0 + eta * mu1]),
            model.cond_components,
        )
        x_hat = diffusion.ddim_sample(model, z_eta[None, :], sched,
                                      cfg.diffusion.steps, cond=cond)
        frames.append(dynsim.render(x_hat[0], cfg.render_grid, ds.mapping))
    strip_dir = os.path.join(ws.run_dir, "kde")
    os.makedirs(strip_dir, exist_ok=True)
    ws.artifacts.append(
        write_pgm(os.path.join(strip_dir, "morph-strip.pgm"), hstack_images(frames))
    )
    diff_imgs = []
    for i, eta in enumerate(eta_list):
        diff = frames[i] - frames[0]
        rows.append(dict(dataset=cfg.dataset.name, space="C",
                         method=f"kde@{float(eta):g}", metric="diff_l1",
                         value=float(np.abs(diff).sum()), std=None,
                         n=diff.size, seed=cfg.seed))
        diff_imgs.append(0.5 + 0.5 * diff)
    ws.artifacts.append(
        write_pgm(os.path.join(strip_dir, "diff-strip.pgm"), hstack_images(diff_imgs))
    )
    csv_path = write_csv(os.path.join(ws.run_dir, "kde.csv"), rows)
    ws.artifacts.append(csv_path)
    manifest = ws.manifest("kde-edit", {"etas": list(map(float, eta_list))})
    return {"rows": rows, "frames": frames, "csv": csv_path, "manifest": manifest,
            "peaks": (kde.m_class0.tolist(), kde.m_class1.tolist())}


def cmd_sweep_dim(cfg, out_dir, d_list, force=False):
    if len(d_list) == 0:
        raise ConfigError("dimension list must be nonempty", field="sweep.d_list")
    all_rows = []
    for d in d_list:
        sub = dataclasses.replace(cfg)
        sub.embedding = dataclasses.replace(cfg.embedding, d=int(d))
        result = cmd_pipeline(sub, out_dir, force=force)
        for r in result["rows"]:
            r = dict(r)
            r["dataset"] = f"{cfg.dataset.name}:d{int(d)}"
            all_rows.append(r)
    ws = Workspace(out_dir, cfg, force)
    csv_path = write_csv(os.path.join(ws.run_dir, "sweep-dim.csv"), all_rows)
    ws.artifacts.append(csv_path)
    manifest = ws.manifest("sweep-dim", {"d_list": [int(d) for d in d_list]})
    return {"rows": all_rows, "csv": csv_path, "manifest": manifest}


def orthogonality_values(cfg, ds, z_all, encoder):
    test = _flatten(ds, z_all, "test")
    c_test = contrastive.embed(encoder, test["z"])
    return {
        "Z": analysis.orthogonality_probe(test["z"], test["tau"], test["mu"]),
        "C": analysis.orthogonality_probe(c_test, test["tau"], test["mu"]),
    }


def probe_embedding_config(cfg):
    """Encoder settings for the disentanglement probe: a compact 3-d space
    trained with both proximity clauses (phase window across trajectories
    plus a regime window), so both factors get an explicit axis."""
    emb = cfg.embedding
    return dataclasses.replace(
        emb,
        d=min(emb.d, 3),
        cross_trajectory_time=True,
        delta_y=emb.delta_y if emb.delta_y is not None else 0.05,
    )


def cmd_probe_orthogonality(cfg, out_dir, force=False):
    ws = Workspace(out_dir, cfg, force)
    ds = stage_dataset(ws)
    model, sched = stage_diffusion(ws, ds)
    z_all = stage_latents(ws, ds, model, sched)
    encoder = stage_encoder(ws, ds, z_all, probe_embedding_config(cfg),
                            tag="encoder-probe")
    values = orthogonality_values(cfg, ds, z_all, encoder)
    rows = [
        dict(dataset=cfg.dataset.name, space=space, method="ols-probe",
             metric="regression_cosine", value=v, std=None,
             n=len(ds.indices("test")) * z_all.shape[1], seed=cfg.seed)
        for space, v in values.items()
    ]
    csv_path = write_csv(os.path.join(ws.run_dir, "orthogonality.csv"), rows)
    ws.artifacts.append(csv_path)
    manifest = ws.manifest("probe-orthogonality", values)
    return {"rows": rows, "values": values, "csv": csv_path, "manifest": manifest}


# ---------------------------------------------------------------------------
# CLI


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config path (defaults used if omitted)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true", help="recompute cached stages")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynalign",
        description="Latent-dynamics editing experiments on synthetic trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "pipeline", "classify", "probe-orthogonality"):
        _add_common(sub.add_parser(name))
    p = sub.add_parser("kde-edit")
    _add_common(p)
    p.add_argument("--etas", default="0,0.25,0.5,0.75,1",
                   help="comma-separated traversal positions in [0, 1]")
    p = sub.add_parser("sweep-dim")
    _add_common(p)
    p.add_argument("--dims", default="2,3,4,8,16", help="comma-separated embedding dims")
    sub.add_parser("config-schema")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "config-schema":
            print(json.dumps(config_schema(), indent=2, sort_keys=True))
            return 0
        cfg = load_config(args.config, args.seed)
        if args.command == "simulate":
            result = cmd_simulate(cfg, args.out, args.force)
        elif args.command == "pipeline":
            result = cmd_pipeline(cfg, args.out, args.force)
        elif args.command == "classify":
            result = cmd_classify(cfg, args.out, args.force)
        elif args.command == "kde-edit":
            etas = [float(x) for x in args.etas.split(",") if x != ""]
            result = cmd_kde_edit(cfg, args.out, etas, args.force)
        elif args.command == "sweep-dim":
            dims = [int(x) for x in args.dims.split(",") if x != ""]
            result = cmd_sweep_dim(cfg, args.out, dims, args.force)
        elif args.command == "probe-orthogonality":
            result = cmd_probe_orthogonality(cfg, args.out, args.force)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    for key in ("csv", "manifest", "dataset"):
        if key in result:
            print(f"{key}: {result[key]}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
