"""Training loop, evaluation, instrumentation and experiment grids."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, from_flat, parse_lines
from .data import (ExamplePair, Vocab, batch_by_tokens, dump_corpus, make_toy_corpus,
                   smoothed_targets, word_dropout)
from .evaluation import bleu
from .model import Transformer
from .norms import layer_norm, norm_op_count, rms_norm, scale_norm
from .optim import AdamState, DivergenceError, ScheduleState, adam_step, current_lr, lr_val_step
from .tensor import ParameterSet, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "train_loss", "grad_norm", "dev_bleu", "dev_ppl", "wall_ms")
GPROFILE_COLUMNS = ("site", "layer", "step", "g")
STATUSES = ("converged", "early_stopped", "failed")


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    lr: float
    train_loss: float
    grad_norm: float
    dev_bleu: float | None = None
    dev_ppl: float | None = None
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, c)) for c in LOG_COLUMNS]


@dataclass(frozen=True)
class GProfileRow:
    site: str
    layer: int
    step: int
    g: float


@dataclass
class RunReport:
    name: str
    status: str
    stop_reason: str
    steps: int
    epochs: int
    best_dev_bleu: float | None
    best_step: int | None
    final_dev_bleu: float | None
    failed_step: int | None
    mean_step_ms: float | None
    wall_s: float
    out_dir: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def early_stop_check(dev_history: Sequence[float], patience: int) -> bool:
    """True iff none of the last ``patience`` evaluations set a new strict best."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(dev_history) <= patience:
        return False
    return max(dev_history[-patience:]) <= max(dev_history[:-patience])


def extract_g_profile(model: Transformer, step: int) -> list[GProfileRow]:
    """One row per norm site: ScaleNorm's g, or the mean gain for LayerNorm/RMSNorm."""
    rows = []
    for sid, prefix in model.norm_sites():
        scope = model.scope(prefix)
        if "g" in scope:
            value = float(scope["g"].data)
        elif "gain" in scope:
            value = float(scope["gain"].data.mean())
        else:
            continue
        rows.append(GProfileRow(sid.site, sid.layer_index, step, value))
    return rows


def write_gprofile(rows: Iterable[GProfileRow], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("w" if new else "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(GPROFILE_COLUMNS)
        for r in rows:
            w.writerow([r.site, r.layer, r.step, repr(r.g)])


class BatchStream:
    """Endless sequence of token-budget batches; pass ``k`` is shuffled by ``(seed, k)``."""

    def __init__(self, pairs: Sequence[ExamplePair], budget: int, seed: int,
                 pass_index: int = 0, position: int = 0):
        self.pairs, self.budget, self.seed = pairs, budget, seed
        self.pass_index, self.position = pass_index, position
        self._batches = self._make(pass_index)

    def _make(self, k: int):
        return batch_by_tokens(self.pairs, self.budget, np.random.default_rng([self.seed, 2, k]))

    @property
    def batches_per_pass(self) -> int:
        return len(self._batches)

    def next(self):
        if self.position >= len(self._batches):
            self.pass_index += 1
            self.position = 0
            self._batches = self._make(self.pass_index)
        b = self._batches[self.position]
        self.position += 1
        return b


def build_data(cfg: ExperimentConfig) -> tuple[list[ExamplePair], list[ExamplePair], Vocab]:
    d = cfg.data
    pairs, vocab = make_toy_corpus(d.task, d.n_train + d.n_dev, (d.len_min, d.len_max),
                                   d.vocab_size, d.seed)
    return pairs[: d.n_train], pairs[d.n_train:], vocab


def evaluate(model: Transformer, dev: Sequence[ExamplePair], budget: int,
             extra_len: int = 5) -> tuple[float, float]:
    """Greedy-decoding dev BLEU and teacher-forced label-smoothed dev perplexity."""
    refs = [list(p.tgt[1:-1]) for p in dev]
    hyps: list[list[int]] = [[] for _ in dev]
    order = sorted(range(len(dev)), key=lambda i: len(dev[i].src))
    total, ntok = 0.0, 0
    with T.no_grad():
        for start in range(0, len(order), 256):
            chunk = order[start:start + 256]
            limit = max(len(dev[i].src) for i in chunk) + extra_len
            for i, h in zip(chunk, model.greedy_decode([dev[i].src for i in chunk], limit)):
                hyps[i] = h
        for b in batch_by_tokens(dev, max(budget, max(p.n_tokens for p in dev))):
            loss, n = model.loss(b.src, b.tgt_in, b.tgt_out)
            total += float(loss.data)
            ntok += n
    return bleu(hyps, refs).bleu, math.exp(total / max(ntok, 1))


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def model_from_checkpoint(path: str | Path) -> tuple[Transformer, dict]:
    ck = load_checkpoint(path)
    meta = ck["meta"]
    cfg = from_flat(parse_lines(meta["config"].splitlines()))
    mask = ck["arrays"]["target_mask"].astype(bool)
    trainable = set(meta.get("trainable", ck["params"]))
    params = ParameterSet({k: Tensor(v, requires_grad=k in trainable) for k, v in ck["params"].items()})
    return Transformer(cfg.model, mask.size, mask, params=params), meta


def _read_log(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    return rows[1:]


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> RunReport:
    """Train one configuration and write its log, g-profiles, checkpoints and report.

    Files in ``cfg.out_dir``: ``log.csv``, ``gprofile.csv``, ``best.npz``
    (highest dev BLEU, earliest on ties), ``last.npz`` (full training state,
    written after every evaluation) and ``report.json``.
    """
    t_start = time.perf_counter()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    train, dev, vocab = build_data(cfg)
    dim = cfg.lr_dim
    model = Transformer(cfg.model, len(vocab), vocab.target_mask,
                        rng=np.random.default_rng([cfg.seed, 0]))
    params = model.params.trainable()
    drop_rng = np.random.default_rng([cfg.seed, 1])
    stream = BatchStream(train, cfg.data.batch_tokens, cfg.seed)
    sched, adam = ScheduleState(), AdamState()
    step, epoch = 0, 0
    history: list[float] = []
    best_bleu, best_step = None, None
    log_path, gp_path = out / "log.csv", out / "gprofile.csv"

    if resume and (out / "last.npz").exists():
        ck = load_checkpoint(out / "last.npz")
        meta = ck["meta"]["state"]
        for k, v in ck["params"].items():
            model.params[k].data[...] = v
        adam = AdamState(m=ck["adam_m"], v=ck["adam_v"], t=meta["adam_t"])
        sched = ScheduleState(**meta["schedule"])
        drop_rng = _restore_rng(meta["drop_rng"])
        stream = BatchStream(train, cfg.data.batch_tokens, cfg.seed, *meta["stream"])
        step, epoch = meta["step"], meta["epoch"]
        history = list(meta["history"])
        best_bleu, best_step = meta["best_bleu"], meta["best_step"]
        kept = [r for r in _read_log(log_path) if int(r[0]) <= step]
        with log_path.open("w", newline="") as f:
            csv.writer(f).writerows([LOG_COLUMNS, *kept])
        if gp_path.exists():
            with gp_path.open(newline="") as f:
                body = [r for r in list(csv.reader(f))[1:] if int(r[2]) <= step]
            with gp_path.open("w", newline="") as f:
                csv.writer(f).writerows([GPROFILE_COLUMNS, *body])
    else:
        with log_path.open("w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
        write_gprofile(extract_g_profile(model, 0), gp_path)
        dump_corpus(dev, vocab, out / "dev.txt")
        vocab.save(out / "vocab.txt")

    iters = cfg.iters_per_epoch or stream.batches_per_pass
    status, reason, failed_step = "converged", "max_epochs", None
    step_times: list[float] = []
    pending: list[TrainLogRecord] = []
    final_bleu = history[-1] if history else None

    def flush():
        with log_path.open("a", newline="") as f:
            csv.writer(f).writerows(r.row() for r in pending)
        pending.clear()

    def save(path: Path, with_state: bool):
        meta = {"config": dump_config(cfg), "step": step, "epoch": epoch,
                "dev_bleu": history[-1] if history else None,
                "trainable": sorted(params)}
        if with_state:
            meta["state"] = {"adam_t": adam.t, "schedule": sched.to_dict(),
                             "drop_rng": _rng_state(drop_rng),
                             "stream": [stream.pass_index, stream.position],
                             "step": step, "epoch": epoch, "history": history,
                             "best_bleu": best_bleu, "best_step": best_step}
        save_checkpoint(path, meta, model.params,
                        adam.m if with_state else None, adam.v if with_state else None,
                        {"target_mask": vocab.target_mask})

    done = False
    with np.errstate(all="ignore"):
        while epoch < cfg.max_epochs and not done:
            epoch += 1
            for _ in range(iters):
                t0 = time.perf_counter()
                if current_lr(sched, cfg.schedule, dim) < cfg.schedule.min_lr:
                    reason, done = "min_lr", True
                    break
                lr_val_step(sched, cfg.schedule, d=dim)
                step = sched.step
                batch = stream.next()
                lval, gnorm = math.nan, math.nan
                try:
                    with T.strict_mode(cfg.strict):
                        tgt_in = word_dropout(batch.tgt_in, cfg.model.word_dropout, rng=drop_rng)
                        loss_sum, ntok = model.loss(batch.src, tgt_in, batch.tgt_out, rng=drop_rng)
                        loss = T.scale(loss_sum, 1.0 / ntok)
                        if cfg.inject_nan_step and step == cfg.inject_nan_step:
                            loss = T.scale(loss, math.nan)
                        lval = float(loss.data)
                        if not math.isfinite(lval):
                            raise DivergenceError(f"non-finite loss at step {step}")
                        grads = T.grad(loss, params)
                    gnorm = T.global_norm(grads)
                    if not math.isfinite(gnorm):
                        raise DivergenceError(f"non-finite gradient norm at step {step}")
                    if cfg.clip_norm > 0:
                        grads = T.clip_by_global_norm(grads, cfg.clip_norm)
                    adam_step(params, grads, adam, sched.lr)
                except T.NonFiniteError as e:
                    log.warning("%s: %s", cfg.name, e)
                    status, reason, failed_step, done = "failed", "diverged", step, True
                dt = time.perf_counter() - t0
                step_times.append(dt)
                pending.append(TrainLogRecord(step, epoch, sched.lr, lval, gnorm,
                                              wall_ms=1000 * (time.perf_counter() - t_start)))
                if done:
                    break
            if status == "failed" or (done and not pending):
                break
            dev_bleu, dev_ppl = evaluate(model, dev, cfg.data.batch_tokens, cfg.decode_extra_len)
            final_bleu = dev_bleu
            history.append(dev_bleu)
            if pending:
                pending[-1].dev_bleu, pending[-1].dev_ppl = dev_bleu, dev_ppl
            lr_val_step(sched, cfg.schedule, dev_bleu, d=dim)
            log.info("%s epoch %d step %d bleu %.2f ppl %.3f lr %.3g", cfg.name, epoch, step,
                     dev_bleu, dev_ppl, sched.lr)
            flush()
            write_gprofile(extract_g_profile(model, step), gp_path, append=True)
            if best_bleu is None or dev_bleu > best_bleu:
                best_bleu, best_step = dev_bleu, step
                save(out / "best.npz", with_state=False)
            save(out / "last.npz", with_state=True)
            if done:
                break
            if current_lr(sched, cfg.schedule, dim) < cfg.schedule.min_lr:
                reason = "min_lr"
                break
            if cfg.stop_at_bleu and dev_bleu >= cfg.stop_at_bleu:
                reason = "target_bleu"
                break
            if early_stop_check(history, cfg.early_stop_patience):
                status, reason = "early_stopped", "early_stop"
                break
    if pending:
        flush()

    report = RunReport(cfg.name, status, reason, step, epoch, best_bleu, best_step, final_bleu,
                       failed_step, 1000 * statistics.fmean(step_times) if step_times else None,
                       time.perf_counter() - t_start, str(out))
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


# ---------------------------------------------------------------- grids

def _grid_job(args) -> RunReport:
    cfg, = args
    return run_experiment(cfg)


def grid_workers() -> int:
    try:
        return max(1, int(os.environ.get("NORMFORGE_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(configs: Sequence[tuple[str, ExperimentConfig]], seeds: Sequence[int],
             out_dir: str | Path, workers: int | None = None) -> list[dict]:
    """Run every (config, seed) pair and write ``grid.csv`` and ``runs.csv``.

    ``grid.csv`` has one row per config: ``config``, ``seed_<s>`` cells with the
    best dev BLEU (or ``fail``), ``mean`` over non-failed seeds,
    ``divergence_rate`` and ``mean_step_ms``.
    """
    if not configs:
        raise ValueError("run_grid needs at least one config")
    seeds = list(seeds) or [0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(name, s, replace(cfg, name=f"{name}/seed{s}", seed=s,
                              out_dir=str(out / name / f"seed{s}")))
            for name, cfg in configs for s in seeds]
    workers = workers or grid_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_grid_job, [(c,) for _, _, c in jobs]))
    else:
        reports = [run_experiment(c) for _, _, c in jobs]

    with (out / "runs.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "seed", "status", "best_dev_bleu", "failed_step", "steps", "mean_step_ms"])
        for (name, s, _), r in zip(jobs, reports):
            w.writerow([name, s, r.status, r.best_dev_bleu, r.failed_step, r.steps, r.mean_step_ms])

    table = []
    for name, _ in configs:
        cells = {s: r for (n, s, _), r in zip(jobs, reports) if n == name}
        ok = [r.best_dev_bleu for r in cells.values() if r.status != "failed" and r.best_dev_bleu is not None]
        fails = sum(r.status == "failed" for r in cells.values())
        times = [r.mean_step_ms for r in cells.values() if r.mean_step_ms is not None]
        row = {"config": name}
        for s in seeds:
            r = cells[s]
            row[f"seed_{s}"] = "fail" if r.status == "failed" else r.best_dev_bleu
        row["mean"] = statistics.fmean(ok) if ok else None
        row["divergence_rate"] = fails / len(cells)
        row["mean_step_ms"] = statistics.fmean(times) if times else None
        table.append(row)
    with (out / "grid.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]))
        w.writeheader()
        for row in table:
            w.writerow({k: ("" if v is None else f"{v:.4f}" if isinstance(v, float) else v)
                        for k, v in row.items()})
    return table


# ---------------------------------------------------------------- curves

def _load_csv(path: Path, required: Sequence[str]) -> list[dict[str, str]]:
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        return list(reader)


def emit_curves(run_dirs: Sequence[str | Path], out_dir: str | Path, plot: bool = False) -> list[Path]:
    """Per-run curve and g-profile CSVs plus step-aligned overlays across runs."""
    if not run_dirs:
        raise ValueError("emit_curves needs at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    series: dict[str, list[dict[str, str]]] = {}
    for rd in map(Path, run_dirs):
        name = rd.name if rd.name not in series else f"{rd.parent.name}_{rd.name}"
        rows = _load_csv(rd / "log.csv", LOG_COLUMNS)
        series[name] = rows
        p = out / f"{name}_curve.csv"
        with p.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        written.append(p)
        if (rd / "gprofile.csv").exists():
            gp = _load_csv(rd / "gprofile.csv", GPROFILE_COLUMNS)
            p = out / f"{name}_gprofile.csv"
            with p.open("w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=GPROFILE_COLUMNS, extrasaction="ignore")
                w.writeheader()
                w.writerows(gp)
            written.append(p)
    for metric in ("train_loss", "grad_norm", "lr", "dev_bleu", "dev_ppl"):
        steps = sorted({int(r["step"]) for rows in series.values() for r in rows if r[metric]})
        lookup = {n: {int(r["step"]): r[metric] for r in rows if r[metric]} for n, rows in series.items()}
        p = out / f"overlay_{metric}.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", *series])
            for s in steps:
                w.writerow([s, *(lookup[n].get(s, "") for n in series)])
        written.append(p)
        if plot:
            written.append(_plot_overlay(p, metric))
    return written


def _plot_overlay(csv_path: Path, metric: str) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with csv_path.open(newline="") as f:
        rows = list(csv.reader(f))
    names = rows[0][1:]
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, n in enumerate(names, 1):
        pts = [(int(r[0]), float(r[j])) for r in rows[1:] if r[j]]
        if pts:
            ax.plot(*zip(*pts), label=n, marker="o" if metric.startswith("dev") else None)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    if metric == "grad_norm":
        ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    png = csv_path.with_suffix(".png")
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png


# ---------------------------------------------------------------- benchmark

def bench_norms(d: int = 512, batch: int = 4096, repeats: int = 5, seed: int = 0) -> dict[str, dict]:
    """Forward+backward wall time (median ms) and op counts for each norm variant."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(batch, d))
    seed_grad = rng.normal(size=(batch, d))
    cases = {
        "LayerNorm": lambda x: layer_norm(x, Tensor(np.ones(d), True), Tensor(np.zeros(d), True)),
        "ScaleNorm": lambda x: scale_norm(x, Tensor(np.array(math.sqrt(d)), True)),
        "RMSNorm": lambda x: rms_norm(x, Tensor(np.ones(d), True)),
    }
    results = {}
    for name, fn in cases.items():
        times = []
        for _ in range(repeats + 1):
            x = Tensor(x0, requires_grad=True)
            t0 = time.perf_counter()
            fn(x).backward(seed_grad)
            times.append(1000 * (time.perf_counter() - t0))
        results[name] = {"op_count": norm_op_count(name, d),
                         "fwd_bwd_ms": statistics.median(times[1:])}
    return results
