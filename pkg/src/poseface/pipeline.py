"""Three-stage pipeline (data -> landmark autoencoder -> recognition model) and reporting."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .autoencoder import (AutoEncoderModel, PretrainResult, ae_batch_loss, code_separation, decoder_forward,
                          encode_batched, encoder_forward, load_autoencoder, pretrain, save_autoencoder)
from .config import RunConfig, config_dict, serialize_config, with_values
from .errors import MissingArtifactError, NumericError
from .geometry import DEFAULT_FRAME, N_LANDMARKS, adaptive_ratio, render_heatmap_batch
from .losses import Batch, BatchLabels, LossWeights, paa_loss, pose_loss, poseface_loss
from .metrics import (IdentificationProtocol, ScoreSet, class_geometry, eer, auc, kfold_accuracy,
                      orth_probe, pca_project, rank1, tar_at_far)
from .model import ModelDims, PoseFaceModel, build_model, embed, load_model, orth_penalty, save_model
from .synthdata import Dataset, generate, make_pairs, read_dataset, read_pairs, write_dataset, write_pairs

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.bin"
PAIRS_FILE = "pairs.txt"
AE_FILE = "landmark_ae.bin"
MODEL_FILE = "model.bin"
REPORT_FARS = (1e-1, 1e-2, 1e-3)
LOSS_PARTS = ("total", "paa", "pose", "orth")


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `{hint}` first")
    return path


def load_data(cfg: RunConfig) -> tuple[Dataset, list[tuple[int, int, bool]]]:
    root = Path(cfg.artifact_dir)
    ds = read_dataset(_require(root / DATASET_FILE, "gen-data"))
    pairs = read_pairs(_require(root / PAIRS_FILE, "gen-data"))
    return ds, pairs


def load_ae(cfg: RunConfig) -> AutoEncoderModel:
    return load_autoencoder(_require(Path(cfg.artifact_dir) / AE_FILE, "pretrain-ae"))


def heatmaps(cfg: RunConfig, landmarks: np.ndarray) -> np.ndarray:
    return render_heatmap_batch(landmarks, DEFAULT_FRAME, cfg.heatmap_size, cfg.heatmap_size, cfg.heatmap_radius)


# ---------------------------------------------------------------------------
# stage 1: data
# ---------------------------------------------------------------------------

def run_gen_data(cfg: RunConfig) -> Dataset:
    root = Path(cfg.artifact_dir)
    root.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg.dataset_spec())
    write_dataset(ds, root / DATASET_FILE)
    write_pairs(make_pairs(ds, cfg.n_folds, cfg.pairs_per_fold), root / PAIRS_FILE)
    return ds


# ---------------------------------------------------------------------------
# stage 2: landmark autoencoder
# ---------------------------------------------------------------------------

@dataclass
class AeReport:
    result: PretrainResult
    code_min_distance: float


AE_HOLDOUT = 256


def pretrain_landmark_ae(cfg: RunConfig, ds: Dataset) -> tuple[AutoEncoderModel, AeReport]:
    """Fit the autoencoder on training-split heatmaps, scoring a held-out slice of them.

    The holdout comes from the training split because the codes are only ever
    used as targets for training samples.
    """
    model = AutoEncoderModel.create(cfg.heatmap_size, cfg.heatmap_size, tuple(cfg.ae_hidden), cfg.d_p,
                                    seed=cfg.seed, dtype=_dtype(cfg))
    all_h = heatmaps(cfg, ds.train.landmarks)
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAE, 2])).permutation(len(all_h))
    n_hold = min(AE_HOLDOUT, len(all_h) // 5)
    hold_h, train_h = all_h[order[:n_hold]], all_h[order[n_hold:]]
    result = pretrain(model, train_h, cfg.ae_epochs, cfg.ae_sgd(), cfg.lambda_h, cfg.ae_batch_size,
                      seed=cfg.seed, holdout=hold_h if n_hold else None)
    # distinct landmark sets can rasterise to the same stack, so only distinct stacks are compared
    codes = encode_batched(model, np.unique(all_h, axis=0))
    return model, AeReport(result, code_separation(codes))


def run_pretrain_ae(cfg: RunConfig) -> AeReport:
    ds, _ = load_data(cfg)
    model, rep = pretrain_landmark_ae(cfg, ds)
    root = Path(cfg.artifact_dir)
    path = root / AE_FILE
    if path.exists():
        path.chmod(0o644)
        path.unlink()
    save_autoencoder(model, path)
    r = rep.result
    rows = [(str(i), _fmt(v)) for i, v in enumerate(r.epoch_losses)]
    text = _table(("epoch", "ae_loss"), rows)
    text += "\n" + _table(("quantity", "value"), [
        ("holdout_initial", _fmt(r.holdout_initial)), ("holdout_final", _fmt(r.holdout_final)),
        ("holdout_ratio", _fmt(r.holdout_final / r.holdout_initial)), ("steps", str(r.steps)),
        ("loss_trend_ok", str(r.trend_ok).lower()), ("code_min_distance", _fmt(rep.code_min_distance))])
    (root / "ae_report.txt").write_text(text)
    return rep


# ---------------------------------------------------------------------------
# stage 3: recognition model
# ---------------------------------------------------------------------------

def landmark_point_targets(landmarks: np.ndarray, d_p: int) -> np.ndarray:
    """Centred, unit-norm flattened landmark coordinates, zero-padded to ``d_p``."""
    pts = np.asarray(landmarks, dtype=np.float64).reshape(len(landmarks), -1)
    pts = (pts - DEFAULT_FRAME / 2.0) / DEFAULT_FRAME
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    out = np.zeros((len(pts), d_p))
    out[:, :pts.shape[1]] = pts
    return out


def pose_targets(cfg: RunConfig, ds: Dataset, ae: AutoEncoderModel | None) -> np.ndarray | None:
    if cfg.loss_weights().lambda1 == 0:
        return None
    if cfg.pose_supervision == "landmark_points":
        return landmark_point_targets(ds.train.landmarks, cfg.d_p)
    if ae is None:
        raise MissingArtifactError("landmark_module supervision needs a pretrained autoencoder")
    if ae.code_dim != cfg.d_p:
        raise MissingArtifactError(f"autoencoder code dimension {ae.code_dim} does not match d_p = {cfg.d_p}")
    return encode_batched(ae, heatmaps(cfg, ds.train.landmarks)).astype(np.float64)


def needs_ae(cfg: RunConfig) -> bool:
    return cfg.loss_weights().lambda1 > 0 and cfg.pose_supervision == "landmark_module"


def _clip_grad(p: T.Tensor, max_norm: float) -> None:
    g = float(np.linalg.norm(p.grad))
    if g > max_norm:
        p.grad *= max_norm / g


def train_model(cfg: RunConfig, ds: Dataset, targets: np.ndarray | None) -> tuple[PoseFaceModel, list[dict]]:
    """Mini-batch momentum SGD over the combined objective; returns the model and per-epoch loss means."""
    dtype = _dtype(cfg)
    weights = cfg.loss_weights()
    model = build_model(cfg.model_dims(), ds.n_classes, seed=cfg.seed, scale=cfg.s, m_b=cfg.m_b,
                        delta_m=cfg.effective_delta_m(), dtype=dtype)
    model.manifest.update(lambda1=weights.lambda1, lambda2=weights.lambda2, seed=cfg.seed,
                          use_paa=cfg.use_paa, use_orth=cfg.use_orth, pose_supervision=cfg.pose_supervision)
    opt = T.Sgd(model.parameters(), cfg.sgd())
    obs = ds.train.observations.astype(dtype)
    y = ds.train.identity
    r = adaptive_ratio(ds.train.yaw)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    warmup_steps = cfg.warmup_epochs * math.ceil(len(y) / cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        sums = dict.fromkeys(LOSS_PARTS, 0.0)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(obs[idx], BatchLabels(y[idx], r[idx]),
                          pose_target=None if targets is None else targets[idx])
            opt.zero_grad()
            parts = poseface_loss(batch, model, model.classifier, None, weights, cfg.squared_pose)
            vals = parts.values()
            if not math.isfinite(vals["total"]):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            T.backward(parts.total)
            if cfg.head_clip:
                for p in (model.heads.w_i, model.heads.w_p):
                    if p.grad is not None:
                        _clip_grad(p, cfg.head_clip)
            if step < warmup_steps:
                ramp = (step + 1) / warmup_steps
                for p in opt.params:
                    if p.grad is not None:
                        p.grad *= ramp
            opt.step(epoch)
            step += 1
            for k in LOSS_PARTS:
                sums[k] += vals[k] * len(idx)
        history.append({k: v / len(y) for k, v in sums.items()})
        logger.info("epoch %d %s", epoch, history[-1])
    return model, history


def gallery_indices(ds: Dataset) -> np.ndarray:
    """Most frontal training sample of each training identity (lowest index on ties)."""
    out = []
    for k in range(ds.n_classes):
        cand = np.flatnonzero(ds.train.identity == k)
        out.append(cand[np.argmin(np.abs(ds.train.yaw[cand]))])
    return np.array(out)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class Evaluation:
    metrics: dict  # name -> float (bool flags stored as 0/1)
    orth_matrix: np.ndarray
    projection: np.ndarray  # rows: identity, yaw, pc1, pc2


def evaluate(cfg: RunConfig, model: PoseFaceModel, ds: Dataset, pairs) -> Evaluation:
    m: dict[str, float] = {}
    gal = gallery_indices(ds)
    idm = np.flatnonzero(ds.identification_mask())
    test_emb = embed(model, ds.test.observations).astype(np.float64)
    proto = IdentificationProtocol(embed(model, ds.train.observations[gal]), ds.train.identity[gal],
                                   test_emb[idm], ds.test.identity[idm], ds.test.yaw[idm])
    r1 = rank1(proto)
    for b in range(15, 91, 15):
        if b in r1.per_bucket:
            m[f"rank1_{b}"] = r1.per_bucket[b]
    m["rank1_overall"] = r1.overall
    if r1.frontal is not None:
        m["rank1_frontal"] = r1.frontal
    if r1.profile is not None:
        m["rank1_profile"] = r1.profile

    if pairs:
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        unit = _unit(test_emb)
        ss = ScoreSet(np.einsum("ij,ij->i", unit[a], unit[b]), [p[2] for p in pairs])
        n_folds = max(2, min(cfg.n_folds, len(pairs) // 2))
        m["verif_acc_mean"], m["verif_acc_std"] = kfold_accuracy(ss, k=n_folds)
        m["eer"] = eer(ss)
        m["auc"] = auc(ss)
        for far in REPORT_FARS:
            res = tar_at_far(ss, far)
            m[f"tar@far={far:g}"] = res.tar
            m[f"tar@far={far:g}_saturated"] = float(res.saturated)

    probe = orth_probe(model, ds.test.observations[:cfg.probe_samples])
    m["orth_probe_max"], m["orth_probe_min"] = probe.max, probe.min
    m["orth_penalty"] = float(T.norm(T.l2_normalize(model.heads.w_i.detach(), axis=0).T
                                     @ T.l2_normalize(model.heads.w_p.detach(), axis=0)).item())
    unit_probes = _unit(test_emb[idm])
    m["intra_class_distance"], m["inter_class_distance"] = class_geometry(unit_probes, ds.test.identity[idm])
    pcs = pca_project(unit_probes, 2)
    proj = np.column_stack([ds.test.identity[idm], ds.test.yaw[idm], pcs])
    return Evaluation(m, probe.matrix, proj)


@dataclass
class RunReport:
    config: RunConfig
    history: list[dict]
    metrics: dict
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        """Serializable content; wall-clock time is kept out so reports are reproducible."""
        return {"config": config_dict(self.config), "history": self.history, "metrics": self.metrics}


def run_train(cfg: RunConfig, write: bool = True) -> RunReport:
    t0 = time.perf_counter()
    ds, pairs = load_data(cfg)
    ae = load_ae(cfg) if needs_ae(cfg) else None
    targets = pose_targets(cfg, ds, ae)
    model, history = train_model(cfg, ds, targets)
    ev = evaluate(cfg, model, ds, pairs)
    report = RunReport(cfg, history, ev.metrics, time.perf_counter() - t0)
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / MODEL_FILE)
        write_report(report, out)
        write_plot_data(ev, out)
    return report


def run_eval(cfg: RunConfig, checkpoint=None) -> Evaluation:
    ds, pairs = load_data(cfg)
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / MODEL_FILE
    model = load_model(_require(path, "train"))
    ev = evaluate(cfg, model, ds, pairs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(_metrics_table(ev.metrics))
    _write_csv(out / "eval.csv", ("metric", "value"), [(k, repr(v)) for k, v in ev.metrics.items()])
    return ev


def run_probe_orth(cfg: RunConfig, checkpoint=None, n_samples: int | None = None):
    ds, _ = load_data(cfg)
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / MODEL_FILE
    model = load_model(_require(path, "train"))
    probe = orth_probe(model, ds.test.observations[:n_samples or cfg.probe_samples])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_grid(out / "orth_matrix.csv", probe.matrix)
    return probe


# ---------------------------------------------------------------------------
# gradient check of every loss on 4-class toy problems (float64)
# ---------------------------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-4


def _toy_problem(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    dims = ModelDims(d_in=6, d_b=8, d=3, d_o=4, d_p=3, hidden=(5,))
    model = build_model(dims, 4, seed=seed, scale=64.0, m_b=0.5, delta_m=0.2)
    n = 6
    labels = BatchLabels(rng.integers(0, 4, n), rng.uniform(0.0, 1.0, n))
    obs = rng.normal(size=(n, dims.d_in))
    ae = AutoEncoderModel.create(2, 2, (5,), dims.d_p, seed=seed)
    heat = (rng.uniform(size=(n, ae.input_dim)) < 0.3).astype(np.float64)
    return rng, model, labels, obs, ae, heat


def run_gradcheck(seed: int = 0, step: float = 1e-6) -> list[tuple[str, float]]:
    """Max relative error between backprop and central differences for each loss."""
    rng, model, labels, obs, ae, heat = _toy_problem(seed)
    clf = model.classifier
    rows = []

    F_o = T.Tensor(rng.normal(size=(len(labels), clf.weight.shape[0])), requires_grad=True)
    rows.append(("paa_loss", T.grad_check_params(lambda: paa_loss(F_o, clf, labels), [F_o, clf.weight], step)))

    F_p = T.Tensor(rng.normal(size=(len(labels), 3)), requires_grad=True)
    target = rng.normal(size=F_p.shape)
    rows.append(("pose_loss", T.grad_check_params(lambda: pose_loss(F_p, target), [F_p], step)))
    rows.append(("pose_loss_squared", T.grad_check_params(lambda: pose_loss(F_p, target, squared=True), [F_p], step)))

    W_I, W_P = model.heads.w_i, model.heads.w_p
    rows.append(("orth_penalty", T.grad_check_params(lambda: orth_penalty(W_I, W_P), [W_I, W_P], step)))

    def ae_objective():
        return ae_batch_loss(heat, decoder_forward(ae, encoder_forward(ae, T.Tensor(heat))), 100.0)
    rows.append(("ae_loss", T.grad_check_params(ae_objective, ae.parameters(), step)))

    # frozen encoder supplies the pose pseudo-labels, as in training
    ae.freeze()
    batch = Batch(obs, labels, heatmaps=heat)
    weights = LossWeights(200.0, 1e5)
    rows.append(("poseface_loss", T.grad_check_params(
        lambda: poseface_loss(batch, model, clf, ae, weights).total, model.parameters(), step)))
    return rows


def run_gradcheck_report(out=None, seed: int = 0) -> tuple[list[tuple[str, float]], bool]:
    rows = run_gradcheck(seed)
    ok = all(err < GRADCHECK_TOLERANCE for _, err in rows)
    text = _table(("loss", "max_rel_error", "ok"),
                  [(name, f"{err:.3e}", str(err < GRADCHECK_TOLERANCE).lower()) for name, err in rows])
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "gradcheck.txt").write_text(text)
    return rows, ok


# ---------------------------------------------------------------------------
# sweep over a loss multiplier
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("orth_probe_max", "rank1_profile", "rank1_frontal", "rank1_overall", "verif_acc_mean", "eer")


def run_sweep(cfg: RunConfig, param: str | None = None, values=None) -> list[tuple[float, dict]]:
    param = param or cfg.sweep_param
    values = sorted(set(float(v) for v in (values if values is not None else cfg.sweep_values)))
    rows = []
    for v in values:
        sub = with_values(cfg, **{param: v, "out": str(Path(cfg.out) / f"{param}={v:g}"),
                                  "data_dir": cfg.artifact_dir})
        rows.append((v, run_train(sub).metrics))
    out = Path(cfg.out)
    table = [(f"{v:g}", *(_fmt(m.get(c, float("nan"))) for c in SWEEP_COLUMNS)) for v, m in rows]
    (out / "sweep.txt").write_text(_table((param, *SWEEP_COLUMNS), table))
    _write_csv(out / "sweep.csv", (param, *SWEEP_COLUMNS),
               [(repr(v), *(repr(m.get(c, float("nan"))) for c in SWEEP_COLUMNS)) for v, m in rows])
    return rows


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _table(header, rows) -> str:
    rows = [tuple(map(str, r)) for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def _metrics_table(metrics: dict) -> str:
    return _table(("metric", "value"), [(k, _fmt(v)) for k, v in metrics.items()])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_grid(path: Path, matrix: np.ndarray) -> None:
    _write_csv(path, [f"c{j}" for j in range(matrix.shape[1])], [[repr(float(x)) for x in row] for row in matrix])


def write_report(report: RunReport, out: Path) -> None:
    hist_rows = [(str(i), *(_fmt(h[k]) for k in LOSS_PARTS)) for i, h in enumerate(report.history)]
    text = "# losses per epoch\n" + _table(("epoch", *LOSS_PARTS), hist_rows)
    text += "\n# metrics\n" + _metrics_table(report.metrics)
    text += "\n# config\n" + serialize_config(report.config)
    (out / "report.txt").write_text(text)
    _write_csv(out / "epochs.csv", ("epoch", *LOSS_PARTS),
               [(i, *(repr(h[k]) for k in LOSS_PARTS)) for i, h in enumerate(report.history)])
    _write_csv(out / "metrics.csv", ("metric", "value"), [(k, repr(v)) for k, v in report.metrics.items()])
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    (out / "timing.txt").write_text(f"wall_clock_seconds = {report.wall_clock:.3f}\n")


def write_plot_data(ev: Evaluation, out: Path) -> None:
    _write_grid(out / "orth_matrix.csv", ev.orth_matrix)
    _write_csv(out / "pca.csv", ("identity", "yaw", "pc1", "pc2"),
               [(int(r[0]), repr(float(r[1])), repr(float(r[2])), repr(float(r[3]))) for r in ev.projection])
