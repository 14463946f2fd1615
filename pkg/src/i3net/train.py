"""Training orchestration: configuration, pretraining of the multi-label
classifier, the joint adaptation loop, checkpoints and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import copm, dcbr, rjca
from .autodiff import Tensor
from .detector import (CheckpointError, DetectionModel, ModelConfig, evaluate_map, detection_loss,
                       load_checkpoint, match_batch, predict, save_checkpoint)
from .nn import SGD
from .synth import Dataset, read_dataset

logger = logging.getLogger(__name__)

COMPONENTS = ("dcbr", "copm", "rjca")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class Config:
    tau: float = 0.5
    theta: float = 0.5
    rho: float = 0.7
    gamma: float = 0.1
    temperature: float = 2.0
    lambda1: float = 0.05
    lambda2: float = 1.0
    fused_dim: int = 64
    margin: float = 1.0
    grl_beta: float = 1.0
    learning_rate: float = 1e-3
    lr_decay_epoch: int = -1  # -1: 60% of the schedule
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 0.0  # global gradient-norm cap for the adaptation optimizer; 0 disables
    epochs: int = 10
    warmup_epochs: int = 0  # leading epochs trained on the detection loss alone
    batch_source: int = 8
    batch_target: int = 8
    seed: int = 0
    num_classes: int = 3
    mlc_epochs: int = 5
    mlc_learning_rate: float = 0.01
    mlc_batch: int = 16
    pseudo_gate: float = 0.5
    source_data: str = ""
    target_data: str = ""
    test_data: str = ""
    mlc_checkpoint: str = ""
    dcbr: bool = True
    copm: bool = True
    rjca: bool = True
    wall_clock: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "mlc_learning_rate", "temperature", "fused_dim", "epochs",
                     "batch_source", "batch_target", "grl_beta", "margin"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("tau", "theta", "momentum", "pseudo_gate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        for name in ("lambda1", "lambda2", "gamma", "weight_decay", "mlc_epochs", "warmup_epochs",
                     "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @property
    def decay_epoch(self) -> int:
        return self.lr_decay_epoch if self.lr_decay_epoch >= 0 else int(math.ceil(0.6 * self.epochs))

    @property
    def adapting(self) -> bool:
        return self.dcbr or self.copm or self.rjca

    def with_disabled(self, names: Iterable[str]) -> "Config":
        names = [n.strip() for n in names if n.strip()]
        bad = [n for n in names if n not in COMPONENTS]
        if bad:
            raise ValueError(f"unknown components {bad}; choose from {COMPONENTS}")
        return dataclasses.replace(self, **{n: False for n in names})


def _coerce(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    values = dataclasses.asdict(base) if base else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(raw, fields[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return Config(**values)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ losses
@dataclass
class LossBreakdown:
    step: int
    l_det: float = 0.0
    l_mlc: float = 0.0
    l_dcbr: float = 0.0
    l_la: float = 0.0
    l_adv: float = 0.0
    l_jca: float = 0.0
    l_pr: float = 0.0
    total: float = 0.0

    def recombine(self, lambda1: float, lambda2: float, gamma: float) -> float:
        return float(total_loss(self.l_det, self.l_dcbr, self.l_la + self.l_adv,
                                self.l_jca + gamma * self.l_pr, lambda1, lambda2))


def total_loss(det, dcbr_term, copm_term, rjca_term, lambda1: float = 0.05, lambda2: float = 1.0):
    """det + lambda1 * dcbr + lambda2 * (copm + rjca); works on floats or tensors."""
    for name, v in (("l_det", det), ("l_dcbr", dcbr_term), ("l_copm", copm_term), ("l_rjca", rjca_term)):
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"component {name} is not finite ({val})")
    return det + lambda1 * dcbr_term + lambda2 * (copm_term + rjca_term)


# -------------------------------------------------------------- components
@dataclass
class I3NetState:
    """Everything a checkpoint carries."""

    model: DetectionModel
    mlc: dcbr.MultiLabelClassifier
    disc_img: dcbr.ImageDiscriminator
    disc_pix: copm.PixelDiscriminator
    proj: copm.RandomProjections
    bank: rjca.PrototypeBank

    @classmethod
    def build(cls, cfg: Config) -> "I3NetState":
        model = DetectionModel(ModelConfig(num_classes=cfg.num_classes), seed=cfg.seed)
        shapes = model.tap_shapes()
        rng = np.random.default_rng([cfg.seed, 1])
        mlc = dcbr.MultiLabelClassifier(shapes["g1"][0], cfg.num_classes, rng)
        disc_img = dcbr.ImageDiscriminator(shapes["g2"][0], rng)
        disc_pix = copm.PixelDiscriminator(shapes["low"][0], rng)
        proj = copm.RandomProjections(shapes["low"][0], cfg.num_classes + 1, cfg.fused_dim, rng)
        bank = rjca.PrototypeBank({l: shapes[l][0] for l in model.config.layers}, cfg.num_classes, cfg.rho)
        return cls(model, mlc, disc_img, disc_pix, proj, bank)

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"meta.num_classes": np.array([self.model.config.num_classes], dtype=np.float64)}
        for prefix, mod in (("model.", self.model), ("mlc.", self.mlc), ("disc_img.", self.disc_img),
                            ("disc_pix.", self.disc_pix)):
            out.update({prefix + k: v for k, v in mod.state_dict().items()})
        out.update(self.proj.state())
        out.update(self.bank.state())
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays())

    @classmethod
    def load(cls, path, cfg: Config | None = None) -> "I3NetState":
        arrays = load_checkpoint(path)
        k = int(arrays["meta.num_classes"][0])
        base = cfg or Config(num_classes=k)
        if base.num_classes != k:
            raise CheckpointError(f"{path}: checkpoint has {k} classes, config expects {base.num_classes}")
        fused = arrays["copm.R1"].shape[0]
        state = cls.build(dataclasses.replace(base, fused_dim=fused))
        state.load_arrays(arrays)
        return state

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, mod in (("model.", self.model), ("mlc.", self.mlc), ("disc_img.", self.disc_img),
                            ("disc_pix.", self.disc_pix)):
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            mod.load_state_dict(sub)
        self.proj = copm.RandomProjections.from_state(arrays)
        self.bank.load_state(arrays)


# -------------------------------------------------------------- pretraining
def pretrain_mlc(cfg: Config, state: I3NetState, source: Dataset,
                 log: Callable[[dict], None] | None = None) -> dcbr.MultiLabelClassifier:
    """Fit the classifier (and the backbone blocks feeding ``g1``) on the source multi-label loss, then freeze it."""
    if len(source) == 0:
        raise ValueError("cannot pretrain the multi-label classifier on an empty source set")
    model, mlc = state.model, state.mlc
    prefixes = tuple(model.backbone_prefixes("g1"))
    params = [p for n, p in model.named_parameters() if n.startswith(prefixes)] + mlc.parameters()
    opt = SGD(params, cfg.mlc_learning_rate, cfg.momentum, cfg.weight_decay)
    targets = dcbr.multilabel_targets(source.annotations, cfg.num_classes)
    rng = np.random.default_rng([cfg.seed, 2])
    for epoch in range(cfg.mlc_epochs):
        order = rng.permutation(len(source))
        for s in range(0, len(order), cfg.mlc_batch):
            idx = order[s:s + cfg.mlc_batch]
            g1 = model.forward_with_taps(Tensor(source.images[idx])).taps["g1"]
            loss = dcbr.mlc_loss(targets[idx], mlc(g1))
            opt.zero_grad()
            model.zero_grad()
            loss.backward()
            opt.step()
        if log:
            log({"phase": "pretrain_mlc", "epoch": epoch, "loss": mean_mlc_loss(state, source)})
    model.zero_grad()
    mlc.freeze()
    return mlc


def mean_mlc_loss(state: I3NetState, data: Dataset, batch: int = 100) -> float:
    y = dcbr.multilabel_targets(data.annotations, state.mlc.fc.weight.shape[1])
    scores = dcbr.mlc_scores(state.model, state.mlc, data.images, batch)
    return float(dcbr.mlc_loss(y, Tensor(scores)).item())


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    state: I3NetState
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _slice(t: Tensor, lo: int, hi: int) -> Tensor:
    return t[lo:hi]


def _head_prob_map(logits: Tensor, shape: tuple[int, int]) -> Tensor:
    n, m, k1 = logits.shape
    probs = ad.softmax(logits, axis=-1)
    return ad.transpose(ad.reshape(probs, (n, shape[0], shape[1], k1)), (0, 3, 1, 2))


def train_step(cfg: Config, state: I3NetState, split: dcbr.TargetSplit | None,
               src_images: np.ndarray, src_ann, tgt_images: np.ndarray | None,
               tgt_index: np.ndarray | None, step: int) -> tuple[Tensor, LossBreakdown]:
    """Build the joint objective for one mini-batch pair; returns (loss, breakdown)."""
    model = state.model
    ns = len(src_images)
    use_target = cfg.adapting and tgt_images is not None
    x = np.concatenate([src_images, tgt_images]) if use_target else src_images
    out = model.forward_with_taps(Tensor(x))
    n = x.shape[0]
    anchors = model.anchors
    comb = out.combined()
    labels, box_t = match_batch(anchors.all, src_ann)
    l_det = detection_loss(_slice(comb.logits, 0, ns), _slice(comb.offsets, 0, ns), labels, box_t)
    bd = LossBreakdown(step)
    zero = Tensor(0.0)
    l_dcbr = l_la = l_adv = l_jca = l_pr = zero

    if use_target and cfg.dcbr:
        g1 = out.taps["g1"].data
        y_src = dcbr.multilabel_targets(src_ann, cfg.num_classes)
        bd.l_mlc = dcbr.mlc_loss(y_src, state.mlc(Tensor(g1[:ns]))).item()
        y_hat_t = state.mlc(Tensor(g1[ns:])).data
        w = dcbr.target_weights(y_hat_t, split.assignments[tgt_index], split, cfg.tau, cfg.theta)
        g2 = out.taps["g2"]
        l_dcbr = dcbr.dcbr_adv_loss(_slice(g2, 0, ns), _slice(g2, ns, n), w, state.disc_img, cfg.grl_beta)

    if use_target and cfg.copm:
        low = out.taps["low"]
        src_layer = model.config.layers[0]
        pmap = _head_prob_map(out.heads[src_layer].logits, model.tap_shapes(False)[src_layer])
        f_s = copm.batch_attention(_slice(low, 0, ns), _slice(pmap, 0, ns), state.proj)
        f_t = copm.batch_attention(_slice(low, ns, n), _slice(pmap, ns, n), state.proj)
        l_la = copm.pattern_match_loss(f_s, f_t)
        l_adv = copm.pixel_adv_loss(_slice(low, 0, ns), _slice(low, ns, n), state.disc_pix, cfg.grl_beta)

    if use_target and cfg.rjca:
        bank = state.bank
        a = anchors.anchors_per_cell
        bounds = np.cumsum([0] + [anchors.counts()[l] for l in anchors.layer_shapes])
        src_g: dict[str, dict[int, Tensor]] = {}
        tgt_g: dict[str, dict[int, Tensor]] = {}
        for i, layer in enumerate(anchors.layer_shapes):
            feat = out.taps[layer]
            hw = feat.shape[2] * feat.shape[3]
            pos_s = rjca.positions_from_anchor_labels(labels[:, bounds[i]:bounds[i + 1]], hw, a)
            pos_t = rjca.pseudo_labels(out.heads[layer].probs[ns:], cfg.pseudo_gate, a)
            loc_s = rjca.local_prototypes(_slice(feat, 0, ns), pos_s, cfg.num_classes)
            loc_t = rjca.local_prototypes(_slice(feat, ns, n), pos_t, cfg.num_classes)
            src_g[layer] = bank.update(layer, "source", loc_s)
            tgt_g[layer] = bank.update(layer, "target", loc_t)
        l_jca = rjca.jca_loss(src_g, tgt_g, cfg.margin)
        l_pr = rjca.pr_loss(model, tgt_g, cfg.temperature)

    l_copm = copm.copm_loss(l_la, l_adv)
    l_rjca = rjca.rjca_loss(l_jca, l_pr, cfg.gamma)
    bd.l_det, bd.l_dcbr = l_det.item(), l_dcbr.item()
    bd.l_la, bd.l_adv, bd.l_jca, bd.l_pr = l_la.item(), l_adv.item(), l_jca.item(), l_pr.item()
    try:
        total = total_loss(l_det, l_dcbr, l_copm, l_rjca, cfg.lambda1, cfg.lambda2)
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(f"{exc}; last breakdown: {dataclasses.asdict(bd)}") from None
    bd.total = total.item()
    return total, bd


def _require(path: str, what: str) -> Dataset:
    if not path:
        raise FileNotFoundError(f"no {what} dataset configured")
    if not (Path(path) / "manifest.txt").is_file():
        raise FileNotFoundError(f"{what} dataset not found at {path}")
    return read_dataset(path)


def train(cfg: Config, out_dir=None, source: Dataset | None = None, target: Dataset | None = None,
          state: I3NetState | None = None, on_metrics: Callable[[dict], None] | None = None) -> TrainResult:
    """Run pretraining (unless a frozen classifier is supplied) and the joint adaptation schedule."""
    source = source if source is not None else _require(cfg.source_data, "source")
    if cfg.adapting:
        target = target if target is not None else _require(cfg.target_data, "target")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8") if out else None
    result = TrainResult(state or I3NetState.build(cfg))
    state = result.state
    t0 = time.perf_counter()

    def emit(rec: dict) -> None:
        if cfg.wall_clock:
            rec = {**rec, "wall_seconds": round(time.perf_counter() - t0, 3)}
        result.metrics.append(rec)
        if metrics_fh:
            metrics_fh.write(json.dumps(rec) + "\n")
        if on_metrics:
            on_metrics(rec)

    try:
        if cfg.mlc_checkpoint:
            pre = load_checkpoint(cfg.mlc_checkpoint)
            state.load_arrays({**state.arrays(), **{k: v for k, v in pre.items()
                                                    if k.startswith(("model.", "mlc."))}})
            state.mlc.freeze()
        elif not state.mlc.frozen:
            pretrain_mlc(cfg, state, source)

        model = state.model
        params = model.parameters()
        if cfg.adapting and cfg.dcbr:
            params += state.disc_img.parameters()
        if cfg.adapting and cfg.copm:
            params += state.disc_pix.parameters()
        opt = SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
        rng_s = np.random.default_rng([cfg.seed, 3])
        rng_t = np.random.default_rng([cfg.seed, 4])
        steps = len(source) // cfg.batch_source
        step = 0
        split = None
        for epoch in range(cfg.epochs):
            if epoch == cfg.decay_epoch:
                opt.lr = cfg.learning_rate * cfg.lr_decay_factor
            adapt = cfg.adapting and epoch >= cfg.warmup_epochs
            if adapt and cfg.rjca and epoch == cfg.warmup_epochs:
                rjca.source_global_prototypes(model, source.images, source.annotations, state.bank)
            if adapt and cfg.dcbr:
                split = dcbr.refresh_target_split(model, state.mlc, target.images)
            src_order = rng_s.permutation(len(source))
            tgt_order = rng_t.permutation(len(target)) if adapt else None
            for it in range(steps):
                si = src_order[it * cfg.batch_source:(it + 1) * cfg.batch_source]
                ti = None
                timg = None
                if adapt:
                    lo = (it * cfg.batch_target) % len(target)
                    ti = np.take(tgt_order, range(lo, lo + cfg.batch_target), mode="wrap")
                    timg = target.images[ti]
                loss, bd = train_step(cfg, state, split, source.images[si], [source.annotations[j] for j in si],
                                      timg, ti, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                emit({"epoch": epoch, **dataclasses.asdict(bd)})
                step += 1
            if out:
                path = out / f"checkpoint_epoch{epoch:03d}.i3nt"
                state.save(path)
                state.save(out / "checkpoint_final.i3nt")
                result.checkpoints.append(path)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return result


# ---------------------------------------------------------------- evaluation
def evaluate_state(state: I3NetState, data: Dataset, conf_thresh: float = 0.05, nms_iou: float = 0.45) -> dict:
    dets = predict(state.model, data.images, conf_thresh=conf_thresh, nms_iou=nms_iou)
    res = evaluate_map(dets, data.annotations, state.model.config.num_classes)
    return {"ap": {str(k): v for k, v in sorted(res["ap"].items())}, "map": res["map"], "images": len(data)}


def format_report(report: dict) -> str:
    lines = [f"images = {report['images']}"]
    for k, v in report["ap"].items():
        lines.append(f"ap[{k}] = {v:.6f}")
    lines.append(f"map = {report['map']:.6f}")
    return "\n".join(lines) + "\n"


def evaluate(checkpoint, data) -> dict:
    """Load ``checkpoint`` and report per-class AP and mAP@0.5 on ``data`` (a Dataset or a directory)."""
    state = I3NetState.load(checkpoint)
    ds = data if isinstance(data, Dataset) else read_dataset(data)
    return evaluate_state(state, ds)
