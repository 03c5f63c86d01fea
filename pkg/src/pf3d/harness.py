"""Training, evaluation, checkpoints, and the ablation surface.

Runs are deterministic given (seed, config): scene pools stream from
seeds, every stochastic component draws from an rng derived from the run
seed, and execution is single-threaded.  Metrics land in JSON-lines files;
checkpoints carry parameters, optimizer moments, epoch, a config hash, and
the trainer rng state.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import DetectionLossConfig, decode_detections, detection_loss
from .diagnostics import counters
from .metrics import EvalConfig, evaluate_map
from .model import Detector, ModelConfig
from .pretrain import PretrainModel, pretrain_step
from .synthscene import SceneConfig, ScenePool, split_labels
from .tensor import ContractError, Parameter
from .svgplot import bar_chart, line_chart


class NanGradientError(RuntimeError):
    """Raised when an optimizer step sees a non-finite gradient."""


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay adaptive optimizer with bias correction.

    Parameters without a gradient are skipped entirely (no decay), so
    modules unused by an ablation variant stay at their initialization.
    """

    def __init__(
        self,
        named_params,
        beta1: float = 0.95,
        beta2: float = 0.99,
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ):
        self.params = list(named_params)
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                counters.add("adamw.nan_grad_steps")
                raise NanGradientError(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class LrSchedule:
    warmup_steps: int
    peak: float
    floor: float
    total_steps: int
    init_frac: float = 0.1

    def __post_init__(self):
        if self.floor < 0 or self.peak <= 0:
            raise ContractError("schedule: peak > 0 and floor >= 0 required")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup from init_frac * peak, then cosine to the floor."""
    if step < 0:
        raise ContractError("step must be >= 0")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        init = sched.peak * sched.init_frac
        return init + (sched.peak - init) * (step / sched.warmup_steps)
    if step >= sched.total_steps:
        return sched.floor
    span = max(sched.total_steps - sched.warmup_steps, 1)
    t = (step - sched.warmup_steps) / span
    return sched.floor + (sched.peak - sched.floor) * 0.5 * (1.0 + np.cos(np.pi * t))


# ---------------------------------------------------------------------------
# train configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "detect"  # pretrain | detect
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    peak_lr: float = 2e-3
    floor_lr: float = 1e-5
    warmup_frac: float = 0.1
    beta1: float = 0.95
    beta2: float = 0.99
    weight_decay: float = 0.01
    n_scenes: int = 40
    label_fraction: float = 1.0
    eval_scenes: int = 24
    scene_seed: int = 10_000
    eval_scene_seed: int = 900_000
    init: str = "random"  # random | pretrained
    init_checkpoint: str = ""
    lambda_cls: float = 2.0
    lambda_reg: float = 0.25
    out_dir: str = "runs/out"
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def _from_dict(cls, data: dict):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in data.items():
        if key not in fields:
            raise ContractError(f"unknown config key {key!r} for {cls.__name__}")
        f = fields[key]
        if f.name == "model":
            val = _from_dict(ModelConfig, val)
        elif f.name == "scene":
            val = _from_dict(SceneConfig, val)
        kwargs[key] = val
    return cls(**kwargs)


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(_to_dict(cfg), indent=1, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    return _from_dict(TrainConfig, json.loads(text))


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return config_from_json(f.read())


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PF3DCKPT"


@dataclass
class Checkpoint:
    params: dict
    epoch: int
    config_hash: str
    rng_state: dict | None
    opt_t: int = 0
    opt_m: dict | None = None
    opt_v: dict | None = None


def save_checkpoint(path, model, opt: AdamW | None, epoch: int, cfg_hash: str,
                    rng: np.random.Generator | None = None) -> None:
    params = dict(model.named_parameters())
    names = sorted(params)
    header = {
        "epoch": epoch,
        "config_hash": cfg_hash,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "params": names,
        "opt": {"t": opt.t, "names": names} if opt is not None else None,
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            T.write_tensor(f, params[n].data)
        if opt is not None:
            for n in names:
                T.write_tensor(f, opt.m.get(n, np.zeros_like(params[n].data)))
            for n in names:
                T.write_tensor(f, opt.v.get(n, np.zeros_like(params[n].data)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ContractError(f"not a checkpoint file: {path}")
        (_version,) = struct.unpack("<I", f.read(4))
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        params = {n: T.read_tensor(f) for n in header["params"]}
        opt_t, opt_m, opt_v = 0, None, None
        if header["opt"] is not None:
            opt_t = header["opt"]["t"]
            opt_m = {n: T.read_tensor(f) for n in header["opt"]["names"]}
            opt_v = {n: T.read_tensor(f) for n in header["opt"]["names"]}
    return Checkpoint(
        params, header["epoch"], header["config_hash"], header["rng_state"],
        opt_t, opt_m, opt_v,
    )


def load_pretrained_backbone(model: Detector, ckpt_path) -> int:
    """Copy every ``backbone.*`` parameter from a checkpoint; heads and
    decoder stay freshly initialized.  Returns the number copied."""
    ck = load_checkpoint(ckpt_path)
    own = dict(model.named_parameters())
    copied = 0
    for name, arr in ck.params.items():
        if name.startswith("backbone.") and name in own:
            if own[name].data.shape != arr.shape:
                raise ContractError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} "
                    f"vs model {own[name].data.shape}"
                )
            own[name].data = arr.copy()
            copied += 1
    if copied == 0:
        raise ContractError(f"no backbone parameters found in {ckpt_path}")
    return copied


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def run_pretrain(cfg: TrainConfig) -> dict:
    """Masked-modeling pre-training; returns paths and the epoch log."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = ScenePool(cfg.scene, cfg.scene_seed)
    model = PretrainModel(cfg.model, seed=cfg.seed)
    model.train()
    opt = AdamW(
        list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.weight_decay
    )
    steps_per_epoch = max(1, int(np.ceil(cfg.n_scenes / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch
    sched = LrSchedule(
        int(cfg.warmup_frac * total_steps), cfg.peak_lr, cfg.floor_lr, total_steps
    )
    shuffle_rng = np.random.default_rng([cfg.seed, 0xA11])
    rows = []
    gstep = 0
    keys = ["L_recon_img", "L_recon_vox", "L_den_img", "L_den_vox",
            "L_xmodal_int", "L_depth", "total"]
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(keys, 0.0)
        count = 0
        for batch in _epoch_batches(cfg.n_scenes, cfg.batch_size, shuffle_rng):
            opt.zero_grad()
            batch_loss = None
            for i in batch:
                scene = pool.get(int(i))
                step_rng = np.random.default_rng(
                    [cfg.seed, 0xB2, epoch, int(i)]
                )
                loss, parts = pretrain_step(scene, model, step_rng)
                batch_loss = loss if batch_loss is None else batch_loss + loss
                for k in keys:
                    sums[k] += parts[k]
                count += 1
            (batch_loss * (1.0 / len(batch))).backward()
            try:
                opt.step(lr_at(gstep, sched))
            except NanGradientError:
                counters.add("train.skipped_steps")
            gstep += 1
        rows.append({"epoch": epoch, **{k: sums[k] / count for k in keys}})
    log_path = out / "metrics.jsonl"
    _write_jsonl(log_path, rows)
    ckpt_path = out / "checkpoint.pf3d"
    save_checkpoint(ckpt_path, model, opt, cfg.epochs, config_hash(cfg), shuffle_rng)
    return {"log": str(log_path), "checkpoint": str(ckpt_path), "epochs": rows}


def evaluate_detector(model: Detector, pool: ScenePool, scene_ids) -> dict:
    """Deterministic evaluation: mAP over the given scene ids."""
    model.eval()
    preds, gts = {}, {}
    for i in scene_ids:
        scene = pool.get(int(i))
        res = model(scene)
        preds[scene.scene_id] = decode_detections(res.final, model.grid)
        gts[scene.scene_id] = scene.gt_boxes
    model.train()
    return evaluate_map(preds, gts, EvalConfig())


def run_detect(cfg: TrainConfig) -> dict:
    """Detection training (optionally from a pre-trained backbone) with a
    final held-out evaluation."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = ScenePool(cfg.scene, cfg.scene_seed)
    labeled = split_labels(list(range(cfg.n_scenes)), cfg.label_fraction)
    model = Detector(cfg.model, seed=cfg.seed)
    if cfg.init == "pretrained":
        load_pretrained_backbone(model, cfg.init_checkpoint)
    elif cfg.init != "random":
        raise ContractError(f"unknown init {cfg.init!r}")
    model.train()
    loss_cfg = DetectionLossConfig(cfg.lambda_cls, cfg.lambda_reg)
    opt = AdamW(
        list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.weight_decay
    )
    steps_per_epoch = max(1, int(np.ceil(len(labeled) / cfg.batch_size)))
    total_steps = cfg.epochs * steps_per_epoch
    sched = LrSchedule(
        int(cfg.warmup_frac * total_steps), cfg.peak_lr, cfg.floor_lr, total_steps
    )
    shuffle_rng = np.random.default_rng([cfg.seed, 0xA22])
    rows = []
    gstep = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {"loss": 0.0, "loss_cls": 0.0, "loss_reg": 0.0}
        count = 0
        for batch in _epoch_batches(len(labeled), cfg.batch_size, shuffle_rng):
            opt.zero_grad()
            batch_loss = None
            for bi in batch:
                scene = pool.get(int(labeled[int(bi)]))
                drop_rng = np.random.default_rng(
                    [cfg.seed, 0xC3, epoch, int(scene.scene_id) & 0x7FFFFFFF]
                )
                res = model(scene, rng=drop_rng)
                loss, parts = detection_loss(
                    res.pred_sets, scene.gt_boxes, model.grid, loss_cfg
                )
                batch_loss = loss if batch_loss is None else batch_loss + loss
                for k in sums:
                    sums[k] += parts[k]
                count += 1
            (batch_loss * (1.0 / len(batch))).backward()
            try:
                opt.step(lr_at(gstep, sched))
            except NanGradientError:
                counters.add("train.skipped_steps")
            gstep += 1
        rows.append({"epoch": epoch, **{k: sums[k] / count for k in sums}})

    result = {"final": True, "mAP": None}
    if cfg.eval_scenes > 0:
        eval_pool = ScenePool(cfg.scene, cfg.eval_scene_seed)
        ev = evaluate_detector(model, eval_pool, range(cfg.eval_scenes))
        result = {
            "final": True,
            "mAP": ev["mAP"],
            "per_class": {k: v["ap"] for k, v in ev["per_class"].items()},
        }
    rows_out = rows + [result]
    log_path = out / "metrics.jsonl"
    _write_jsonl(log_path, rows_out)
    ckpt_path = out / "checkpoint.pf3d"
    save_checkpoint(ckpt_path, model, opt, cfg.epochs, config_hash(cfg), shuffle_rng)
    return {
        "log": str(log_path),
        "checkpoint": str(ckpt_path),
        "epochs": rows,
        "mAP": result["mAP"],
    }


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_TABLES = {
    "2a": "pretrained vs random initialization across labeled-data fractions",
    "2c": "fusion in neither / BEV only / BEV+PV view spaces",
    "2d": "fusion block variants",
    "2e": "view-agnostic vs view-specific decoder",
}


def _variant_configs(table: str, base: TrainConfig, fractions) -> list[tuple[str, TrainConfig]]:
    out = []
    if table == "2c":
        for mode in ("none", "bev_only", "bev_pv"):
            cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, fusion_mode=mode))
            out.append((mode, cfg))
    elif table == "2d":
        for variant in ("concat", "self_cross", "base", "base_nocat", "iif"):
            cfg = dataclasses.replace(
                base, model=dataclasses.replace(base.model, fusion_variant=variant)
            )
            out.append((variant, cfg))
    elif table == "2e":
        for mode in ("agnostic", "specific"):
            cfg = dataclasses.replace(
                base, model=dataclasses.replace(base.model, decoder_mode=mode)
            )
            out.append((mode, cfg))
    elif table == "2a":
        for frac in fractions:
            for init in ("random", "pretrained"):
                cfg = dataclasses.replace(base, label_fraction=frac, init=init)
                out.append((f"{int(round(frac * 100))}%/{init}", cfg))
    else:
        raise ContractError(f"unknown ablation table {table!r}; one of {sorted(ABLATION_TABLES)}")
    return out


def run_ablation(
    table: str,
    base: TrainConfig,
    out_dir,
    seeds=(0, 1, 2),
    fractions=(0.2,),
    pretrain_cfg: TrainConfig | None = None,
) -> dict:
    """Train every variant of one ablation row-group over several seeds.

    Only the switch under study varies; everything else comes from
    ``base``.  Table 2a pre-trains once (or reuses ``base.init_checkpoint``)
    and compares random vs pre-trained initialization per fraction.
    Returns the report dict; also writes report.json and a bar chart.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = dataclasses.replace(base, mode="detect")

    if table == "2a" and not base.init_checkpoint:
        pcfg = pretrain_cfg or dataclasses.replace(
            base,
            mode="pretrain",
            out_dir=str(out / "pretrain"),
            label_fraction=1.0,
            init="random",
        )
        pre = run_pretrain(pcfg)
        base = dataclasses.replace(base, init_checkpoint=pre["checkpoint"])

    rows = []
    for name, cfg in _variant_configs(table, base, fractions):
        for seed in seeds:
            run_cfg = dataclasses.replace(
                cfg,
                seed=seed,
                out_dir=str(out / f"{name.replace('%', 'pct').replace('/', '_')}_s{seed}"),
            )
            res = run_detect(run_cfg)
            rows.append({"variant": name, "seed": seed, "mAP": res["mAP"]})

    summary = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        vals = [r["mAP"] for r in rows if r["variant"] == name]
        summary[name] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "runs": vals,
        }
    ranking = sorted(summary, key=lambda k: -summary[k]["mean"])
    report = {"table": table, "rows": rows, "summary": summary, "ranking": ranking}
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=1)
    bar_chart(
        list(summary),
        [summary[k]["mean"] for k in summary],
        out / "report.svg",
        errors=[summary[k]["std"] for k in summary],
        title=f"Ablation {table}: {ABLATION_TABLES[table]}",
        ylabel="mAP",
    )
    return report


def plot_metrics_log(log_path, out_path) -> None:
    """Line chart of every numeric series in a JSON-lines metrics log."""
    rows = [json.loads(line) for line in open(log_path)]
    rows = [r for r in rows if "epoch" in r]
    if not rows:
        raise ContractError(f"no epoch rows in {log_path}")
    xs = [r["epoch"] for r in rows]
    series = {}
    for key in rows[0]:
        if key == "epoch" or not isinstance(rows[0][key], (int, float)):
            continue
        series[key] = (xs, [r.get(key, np.nan) for r in rows])
    line_chart(series, out_path, title=str(log_path), xlabel="epoch", ylabel="value")
