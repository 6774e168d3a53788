"""Training, cross-validated evaluation, inference and ablation runs."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as obj
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import DST, ModelConfig, normalize_hu, sequence_layout
from .phantom import MANIFEST_SCHEMA, FoldPlan, PhantomCase, make_folds
from .tensorcore import SGD, backward, no_grad
from .volume_io import Volume, load_volume

TASKS = ("landmarks", "classification")
CSV_COLUMNS = ("case_id", "landmark", "z_true", "z_pred", "abs_err", "top1", "top2", "within_tau1")


class PipelineError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 4
    max_epochs: int = 60
    patience: int = 20
    seed: int = 0
    padding_side: str = "left"
    attention_enabled: bool = True
    manifest: str | None = None
    fold: int = 0
    k_folds: int = 5
    task: str = "landmarks"

    def __post_init__(self):
        if not self.lr >= 0:
            raise PipelineError("lr must be >= 0")
        if self.patience < 1:
            raise PipelineError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise PipelineError("batch_size and max_epochs must be >= 1")
        if self.padding_side not in ("left", "right"):
            raise PipelineError("padding_side must be 'left' or 'right'")
        if self.task not in TASKS:
            raise PipelineError(f"task must be one of {TASKS}")
        if not 0 <= self.fold < self.k_folds:
            raise PipelineError(f"fold {self.fold} outside [0, {self.k_folds})")

    @property
    def model_config(self) -> ModelConfig:
        """Model config with this run's padding side and attention switch applied."""
        return self.model.replace(padding_side=self.padding_side, attention_enabled=self.attention_enabled)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (f.name for f in dataclasses.fields(self)) if k != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise PipelineError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# ------------------------------------------------------------------ cohorts

@dataclass
class CaseRecord:
    case_id: str
    volume: Volume
    landmarks: np.ndarray | None
    class_label: int | None
    calc_mask_path: str | None = None

    @property
    def inputs(self) -> np.ndarray:
        return normalize_hu(self.volume.voxels)


@dataclass
class Cohort:
    cases: dict[str, CaseRecord]
    z_increases_superior: bool = True

    @property
    def ids(self) -> list[str]:
        return sorted(self.cases)

    @classmethod
    def from_cases(cls, cases: dict[str, PhantomCase]) -> "Cohort":
        return cls({cid: CaseRecord(cid, c.volume, np.asarray(c.landmarks), c.class_label)
                    for cid, c in cases.items()})

    def inputs(self, ids) -> list[np.ndarray]:
        return [self._inputs_cached(i) for i in ids]

    def _inputs_cached(self, cid: str) -> np.ndarray:
        cache = self.__dict__.setdefault("_norm", {})
        if cid not in cache:
            cache[cid] = self.cases[cid].inputs
        return cache[cid]


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise PipelineError(f"unsupported manifest schema {manifest.get('schema')!r}, expected {MANIFEST_SCHEMA}")
    return manifest, path.parent


def load_cohort(path) -> Cohort:
    manifest, root = load_manifest(path)
    cases = {}
    for cid, entry in sorted(manifest["cases"].items()):
        vol_path = root / entry["volume"]
        if not vol_path.exists():
            raise PipelineError(f"missing case volume: {vol_path}")
        lm = entry.get("landmarks")
        cases[cid] = CaseRecord(
            cid,
            load_volume(vol_path),
            None if lm is None else np.asarray(lm, dtype=np.int64),
            entry.get("class_label"),
            str(root / entry["calc_mask"]) if entry.get("calc_mask") else None,
        )
    return Cohort(cases, bool(manifest.get("z_increases_superior", True)))


def check_fold(plan: FoldPlan, fold: int) -> None:
    f = plan.folds[fold]
    tr, va, te = set(f.train), set(f.val), set(f.test)
    if tr & va or tr & te or va & te:
        raise PipelineError(f"fold {fold}: a case id appears in more than one split")
    if not tr:
        raise PipelineError(f"fold {fold}: empty training split")


# ------------------------------------------------------------------ training

@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    val_metric: list[float]
    metric_name: str
    best_epoch: int
    checkpoint_path: str | None
    seconds: float
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self, timing: bool = False) -> dict:
        """JSON view; wall-clock time is omitted unless ``timing`` so reports stay byte-reproducible."""
        d = {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "metric": self.metric_name,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_metric": self.val_metric,
            "checkpoint": self.checkpoint_path,
        }
        if timing:
            d["seconds"] = self.seconds
        return d


def _batches(ids: list[str], size: int) -> list[list[str]]:
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def batch_loss(model: DST, cohort: Cohort, ids: list[str], task: str, rng=None):
    out = model(cohort.inputs(ids), rng)
    if task == "landmarks":
        truth = np.stack([cohort.cases[i].landmarks for i in ids])
        return obj.loss_loc(out.loc_logits, truth, out.slice_mask, out.first_valid), out
    labels = np.asarray([cohort.cases[i].class_label for i in ids])
    return obj.loss_cls(out.cls_logits, labels), out


def predict(model: DST, cohort: Cohort, ids: list[str], batch_size: int = 16) -> dict[str, dict]:
    """Per case: landmark probabilities (N, D) and class probabilities."""
    preds = {}
    with no_grad():
        for chunk in _batches(list(ids), batch_size):
            out = model(cohort.inputs(chunk))
            cls = out.cls_logits.data
            cls_p = np.exp(cls - cls.max(axis=1, keepdims=True))
            cls_p /= cls_p.sum(axis=1, keepdims=True)
            for b, cid in enumerate(chunk):
                preds[cid] = {"probs": out.landmark_probs(b), "class_probs": cls_p[b]}
    return preds


def _val_metric(model: DST, cohort: Cohort, ids: list[str], task: str, batch_size: int) -> tuple[float, float]:
    """(loss, metric): MAE in slices for landmarks, accuracy for classification."""
    if not ids:
        return float("nan"), float("nan")
    total = 0.0
    with no_grad():
        for chunk in _batches(ids, batch_size):
            loss, _ = batch_loss(model, cohort, chunk, task)
            total += loss.item() * len(chunk)
    preds = predict(model, cohort, ids, batch_size)
    if task == "landmarks":
        p = np.stack([obj.argmax_prediction(preds[i]["probs"]) for i in ids])
        t = np.stack([cohort.cases[i].landmarks for i in ids])
        return total / len(ids), obj.mae(p, t)
    p = np.asarray([int(np.argmax(preds[i]["class_probs"])) for i in ids])
    t = np.asarray([cohort.cases[i].class_label for i in ids])
    return total / len(ids), float(np.mean(p == t))


def _improved(metric: float, best: float | None, task: str) -> bool:
    if best is None:
        return True
    return metric < best if task == "landmarks" else metric > best


def train(cfg: TrainConfig, cohort: Cohort | None = None, out_dir=None,
          plan: FoldPlan | None = None, train_ids=None, val_ids=None) -> TrainReport:
    """SGD with momentum and early stopping on the validation metric.

    Splits come from ``train_ids``/``val_ids`` when given, otherwise from the
    fold plan (built from ``cfg.seed`` when not supplied). The best-epoch
    parameters are returned in the report and, with ``out_dir``, written as
    ``best.ckpt``.
    """
    start = time.perf_counter()
    if cohort is None:
        if cfg.manifest is None:
            raise PipelineError("no cohort and no manifest path")
        cohort = load_cohort(cfg.manifest)
    if train_ids is None:
        plan = plan or make_folds(cohort.ids, cfg.k_folds, cfg.seed)
        check_fold(plan, cfg.fold)
        train_ids, val_ids = list(plan.folds[cfg.fold].train), list(plan.folds[cfg.fold].val)
    train_ids, val_ids = list(train_ids), list(val_ids or [])
    if not train_ids:
        raise PipelineError("empty training split")
    if set(train_ids) & set(val_ids):
        raise PipelineError("train and validation splits overlap")
    mcfg = cfg.model_config
    for cid in train_ids + val_ids:
        sequence_layout(cohort.cases[cid].volume.dims[2], mcfg)
    model = DST(mcfg, seed=cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    metric_name = "mae" if cfg.task == "landmarks" else "accuracy"
    curves: dict[str, list[float]] = {"train": [], "val": [], "metric": []}
    best = None
    best_epoch = 0
    best_state = model.state()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        total = 0.0
        for chunk in _batches(order, cfg.batch_size):
            loss, _ = batch_loss(model, cohort, chunk, cfg.task, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}; lower the learning rate")
            model.zero_grad()
            backward(loss)
            opt.step()
            total += value * len(chunk)
        curves["train"].append(total / len(train_ids))
        v_loss, v_metric = _val_metric(model, cohort, val_ids or train_ids, cfg.task, cfg.batch_size)
        curves["val"].append(v_loss)
        curves["metric"].append(v_metric)
        if _improved(v_metric, best, cfg.task):
            best, best_epoch, best_state, stale = v_metric, epoch, model.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(out / "best.ckpt")
        save_checkpoint(Checkpoint(mcfg, best_state, seed=cfg.seed, epoch=best_epoch, val_metric=best,
                                   extra={"task": cfg.task, "fold": cfg.fold}), ckpt_path)
    report = TrainReport(curves["train"], curves["val"], curves["metric"], metric_name, best_epoch,
                         ckpt_path, time.perf_counter() - start, best_state)
    if out_dir is not None:
        write_json(Path(out_dir) / "train_report.json", report.to_dict())
    return report


# ---------------------------------------------------------------- evaluation

def model_from_state(cfg: ModelConfig, state: dict[str, np.ndarray]) -> DST:
    model = DST(cfg, seed=0)
    model.load_state(state)
    return model


def evaluate_cases(model: DST, cohort: Cohort, ids: list[str], task: str = "landmarks") -> tuple[dict, list[dict]]:
    """Metrics dict plus per-case CSV rows for the given test ids."""
    missing = [i for i in ids if i not in cohort.cases]
    if missing:
        raise PipelineError(f"missing cases: {missing}")
    if not ids:
        raise PipelineError("empty test split")
    ids = sorted(ids)
    preds = predict(model, cohort, ids)
    if task == "classification":
        p = np.asarray([int(np.argmax(preds[i]["class_probs"])) for i in ids])
        t = np.asarray([cohort.cases[i].class_label for i in ids])
        rows = [{"case_id": i, "class_true": int(ti), "class_pred": int(pi)} for i, ti, pi in zip(ids, t, p)]
        return {"n_cases": len(ids), "aggregate": {"accuracy": float(np.mean(p == t))}}, rows
    probs = [preds[i]["probs"] for i in ids]
    truths = [cohort.cases[i].landmarks for i in ids]
    report = obj.localization_report(probs, truths)
    rows = []
    for cid, pr, tr in zip(ids, probs, truths):
        zp = obj.argmax_prediction(pr)
        h1 = obj.top_k_hits(pr, tr, 1)
        h2 = obj.top_k_hits(pr, tr, min(2, pr.shape[1]))
        for j, name in enumerate(obj.LANDMARK_NAMES[:len(tr)]):
            err = abs(int(zp[j]) - int(tr[j]))
            rows.append({"case_id": cid, "landmark": name, "z_true": int(tr[j]), "z_pred": int(zp[j]),
                         "abs_err": err, "top1": int(h1[j]), "top2": int(h2[j]), "within_tau1": int(err <= 1)})
    return report.to_dict(), rows


def evaluate(ckpt_path, cohort: Cohort, ids: list[str], task: str | None = None) -> tuple[dict, list[dict]]:
    ckpt = load_checkpoint(ckpt_path)
    task = task or ckpt.extra.get("task", "landmarks")
    return evaluate_cases(model_from_state(ckpt.config, ckpt.params), cohort, ids, task)


def _mean_std(values: list[float]) -> dict[str, float]:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def cross_validate(cfg: TrainConfig, cohort: Cohort, out_dir=None, folds=None) -> dict:
    """Train and test every fold; aggregate metrics as mean and std over folds."""
    plan = make_folds(cohort.ids, cfg.k_folds, cfg.seed)
    fold_ids = range(cfg.k_folds) if folds is None else folds
    entries, all_rows = [], []
    for f in fold_ids:
        check_fold(plan, f)
        fdir = None if out_dir is None else Path(out_dir) / f"fold{f}"
        rep = train(cfg.replace(fold=f), cohort, fdir, plan=plan)
        model = model_from_state(cfg.model_config, rep.state)
        metrics, rows = evaluate_cases(model, cohort, list(plan.folds[f].test), cfg.task)
        entries.append({"fold": f, "best_epoch": rep.best_epoch, "epochs": rep.epochs, **metrics})
        all_rows.extend({"fold": f, **r} for r in rows)
    keys = entries[0]["aggregate"].keys()
    aggregate = {k: _mean_std([e["aggregate"][k] for e in entries]) for k in keys}
    result = {"task": cfg.task, "config": cfg.to_dict(), "folds": entries, "aggregate": aggregate}
    if out_dir is not None:
        write_json(Path(out_dir) / "cv_report.json", result)
        write_csv(Path(out_dir) / "cv_cases.csv", all_rows)
    result["rows"] = all_rows
    return result


# ------------------------------------------------------------------ inference

def infer(ckpt_path, volume) -> dict:
    """Argmax landmarks and the full (N, D) probability matrix for one volume."""
    ckpt = load_checkpoint(ckpt_path)
    v = volume if isinstance(volume, Volume) else load_volume(volume)
    sequence_layout(v.dims[2], ckpt.config)
    model = model_from_state(ckpt.config, ckpt.params)
    with no_grad():
        out = model([v])
    probs = out.landmark_probs(0)
    cls = out.cls_logits.data[0]
    return {
        "landmarks": [int(z) for z in obj.argmax_prediction(probs)],
        "probabilities": probs.tolist(),
        "class_logits": cls.tolist(),
        "depth": int(v.dims[2]),
    }


# ------------------------------------------------------------------- ablation

ABLATION_AXES = ("wo_attention", "right_padding", "layers")
LAYER_SWEEP = (0, 1, 8)


def ablation_variants(base: TrainConfig, axis: str) -> dict[str, TrainConfig]:
    if axis == "wo_attention":
        return {"full": base, "wo_attention": base.replace(attention_enabled=False)}
    if axis == "right_padding":
        return {"left_padding": base.replace(padding_side="left"),
                "right_padding": base.replace(padding_side="right")}
    if axis == "layers":
        return {f"layers_{n}": base.replace(model=base.model.replace(n_layers=n)) for n in LAYER_SWEEP}
    raise PipelineError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_ablation(base: TrainConfig, axis: str, cohort: Cohort, seeds=(0,), out_dir=None,
                 variants: dict[str, TrainConfig] | None = None) -> dict:
    """Train every variant under identical seeds and splits; report them side by side.

    Each seed fixes the fold plan, initialisation and batch order for all
    variants of that seed, so arms differ only in the ablated switch.
    """
    variants = variants or ablation_variants(base, axis)
    metric = "mae" if base.task == "landmarks" else "accuracy"
    table = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for name, vcfg in variants.items():
            vcfg = vcfg.replace(seed=int(seed))
            plan = make_folds(cohort.ids, vcfg.k_folds, vcfg.seed)
            vdir = None if out_dir is None else Path(out_dir) / f"seed{seed}" / name
            rep = train(vcfg, cohort, vdir, plan=plan)
            model = model_from_state(vcfg.model_config, rep.state)
            metrics, _ = evaluate_cases(model, cohort, list(plan.folds[vcfg.fold].test), vcfg.task)
            row[name] = metrics["aggregate"][metric]
        table.append(row)
    names = list(variants)
    summary = {n: _mean_std([r[n] for r in table]) for n in names}
    result = {"axis": axis, "metric": metric, "variants": names, "pairs": table, "summary": summary}
    if out_dir is not None:
        write_json(Path(out_dir) / f"ablation_{axis}.json", result)
        write_csv(Path(out_dir) / f"ablation_{axis}.csv", table)
    return result


# ------------------------------------------------------------------ writers

def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, rows: list[dict], columns=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else CSV_COLUMNS))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
