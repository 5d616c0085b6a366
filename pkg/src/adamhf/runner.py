"""Training, cross-validation, missing-modality evaluation and FLOP ablations."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataio import Manifest, SampleBag, make_folds, subsample_patches
from .layers import Module
from .model import AdaMHF, ForwardContext, assemble_model, forward
from .numerics import ContractError, FlopLedger, backward, flops_snapshot, no_grad
from .survival import (KMCurve, LogRankResult, align_loss, c_index_harrell, c_index_paper, km_curve, log_rank,
                       median_split, nll_loss)

log = logging.getLogger(__name__)

MODES = ("full", "geno_missing", "patho_missing")


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def sample_loss(model: AdaMHF, bag: SampleBag, lam: float, ctx: ForwardContext | None = None):
    out = forward(model, bag.x_p, bag.x_g, ctx)
    surv = nll_loss(out.risk, bag.t, bag.c)
    align = align_loss(out.cls_p, out.cls_g)
    return surv + align * lam, out


@dataclass
class SampleOutcome:
    sample_id: str
    risk: float
    predicted_time: float
    t: int
    c: int


@dataclass
class EvalResult:
    mode: str
    outcomes: list[SampleOutcome]
    c_index_harrell: float | None
    c_index_paper: float
    km: list[KMCurve]
    log_rank: LogRankResult | None
    loss: float
    routing: list[tuple] = field(default_factory=list)
    atsa: list[tuple] = field(default_factory=list)
    downstream_tokens: dict[str, int] = field(default_factory=dict)


def apply_mode(bag: SampleBag, mode: str) -> SampleBag:
    if mode == "full":
        return bag
    if mode == "geno_missing":
        return SampleBag(bag.sample_id, bag.x_p, None, bag.t, bag.c)
    if mode == "patho_missing":
        return SampleBag(bag.sample_id, None, bag.x_g, bag.t, bag.c)
    raise ContractError(f"unknown evaluation mode {mode!r}; both modalities cannot be dropped")


def evaluate(model: AdaMHF, samples: list[SampleBag], mode: str = "full", lam: float = 0.0,
             n_s: int | None = None, seed: int = 0) -> EvalResult:
    outcomes, routing, atsa = [], [], []
    downstream = {"patho": 0, "geno": 0}
    total_loss = 0.0
    with no_grad():
        for bag in samples:
            bag = apply_mode(bag, mode)
            if n_s is not None and bag.x_p is not None:
                bag = SampleBag(bag.sample_id, subsample_patches(bag.x_p, n_s, _sample_rng(seed, bag.sample_id)),
                                bag.x_g, bag.t, bag.c)
            ctx = ForwardContext()
            out = forward(model, bag.x_p, bag.x_g, ctx)
            total_loss += nll_loss(out.risk, bag.t, bag.c).item()
            if lam and bag.x_p is not None and bag.x_g is not None:
                total_loss += lam * align_loss(out.cls_p, out.cls_g).item()
            outcomes.append(SampleOutcome(bag.sample_id, out.risk.risk, out.risk.predicted_time, bag.t, bag.c))
            for site, dec in ctx.gates.items():
                routing.append((bag.sample_id, site, dec.chosen_expert_index,
                                float(dec.gate_probs[dec.chosen_expert_index])))
            for modality, tr in ctx.atsa.items():
                atsa.append((bag.sample_id, modality, tr.K, tr.alpha, tr.kept_indices))
            for k, v in ctx.tokens_after_atsa.items():
                downstream[k] = max(downstream[k], v)
    risk = [o.risk for o in outcomes]
    t = [o.t for o in outcomes]
    c = [o.c for o in outcomes]
    high = median_split(risk)
    if not high.any() or high.all():
        high = np.asarray(risk) >= np.median(risk)
    idx = np.arange(len(outcomes))
    lo_idx, hi_idx = idx[~high], idx[high]
    km = []
    lr = None
    if lo_idx.size and hi_idx.size:
        t_arr, c_arr = np.asarray(t), np.asarray(c)
        km = [km_curve(t_arr[lo_idx], c_arr[lo_idx], "low"), km_curve(t_arr[hi_idx], c_arr[hi_idx], "high")]
        lr = log_rank(t_arr[lo_idx], c_arr[lo_idx], t_arr[hi_idx], c_arr[hi_idx])
    return EvalResult(
        mode=mode,
        outcomes=outcomes,
        c_index_harrell=c_index_harrell(risk, t, c) if len(outcomes) > 1 else None,
        c_index_paper=c_index_paper([o.predicted_time for o in outcomes], c) if len(outcomes) > 1 else float("nan"),
        km=km,
        log_rank=lr,
        loss=total_loss / max(1, len(samples)),
        routing=routing,
        atsa=atsa,
        downstream_tokens=downstream,
    )


def _sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, *sample_id.encode()])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    c_index_harrell: float | None
    c_index_paper: float


@dataclass
class FoldReport:
    fold_index: int
    epochs: list[EpochRecord]
    c_index_harrell: float | None
    c_index_paper: float
    log_rank: LogRankResult | None
    km: list[KMCurve]
    flops: int
    valid_ids: list[str]
    status: str = "ok"
    mean_k: dict[str, float] = field(default_factory=dict)
    final_eval: EvalResult | None = None
    model: AdaMHF | None = None


def train_fold(cfg: RunConfig, samples: dict[str, SampleBag], train_ids: list[str], valid_ids: list[str],
               fold_index: int = 0) -> FoldReport:
    model = assemble_model(cfg)
    params = model.trainable()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, fold_index])
    valid = [samples[i] for i in valid_ids]
    epochs: list[EpochRecord] = []
    status = "ok"
    for epoch in range(cfg.epochs):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            total = None
            for sid in batch:
                bag = samples[sid]
                bag = SampleBag(bag.sample_id, subsample_patches(bag.x_p, cfg.n_s, rng), bag.x_g, bag.t, bag.c)
                loss, _ = sample_loss(model, bag, cfg.lam)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(batch))
            value = total.item()
            if not math.isfinite(value):
                status = f"diverged at epoch {epoch} (loss={value})"
                log.warning("fold %d %s", fold_index, status)
                break
            backward(total)
            opt.step()
            losses.append(value)
        if status != "ok":
            break
        ev = evaluate(model, valid, "full", cfg.lam, cfg.n_s, cfg.seed)
        epochs.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), ev.loss,
                                  ev.c_index_harrell, ev.c_index_paper))
        log.info("fold %d epoch %d train %.4f valid %.4f cidx %s", fold_index, epoch, epochs[-1].train_loss,
                 ev.loss, ev.c_index_harrell)
    final = evaluate(model, valid, "full", cfg.lam, cfg.n_s, cfg.seed)
    flops = forward_flops(model, valid[0]) if valid else 0
    mean_k = {}
    for modality in ("patho", "geno"):
        ks = [k for _, m, k, _, _ in final.atsa if m == modality]
        mean_k[modality] = float(np.mean(ks)) if ks else 0.0
    return FoldReport(fold_index, epochs, final.c_index_harrell, final.c_index_paper, final.log_rank, final.km,
                      flops, list(valid_ids), status, mean_k, final, model)


def forward_flops(model: AdaMHF, bag: SampleBag, ablate=frozenset()) -> int:
    with no_grad(), FlopLedger() as ledger:
        forward(model, bag.x_p, bag.x_g, ForwardContext(ablate=frozenset(ablate)))
    return ledger.total()


def train(cfg: RunConfig, manifest: Manifest) -> list[FoldReport]:
    if manifest.d != cfg.d_model:
        raise ValueError(f"dataset -> model input: dataset d={manifest.d} but d_model={cfg.d_model}")
    if manifest.t_bins != cfg.t_bins:
        raise ValueError(f"dataset -> hazard head: dataset t_bins={manifest.t_bins} but config t_bins={cfg.t_bins}")
    samples = manifest.load_all()
    folds = make_folds(manifest.ids, cfg.folds, cfg.seed)
    return [train_fold(cfg, samples, f.train_ids, f.valid_ids, f.fold_index) for f in folds]


# --------------------------------------------------------------------------
# missing-modality benchmark


@dataclass
class BenchRow:
    mode: str
    fold: str
    c_index_harrell: float
    c_index_paper: float
    std_harrell: float | None = None


def bench_missing(cfg: RunConfig, manifest: Manifest, reports: list[FoldReport] | None = None) -> list[BenchRow]:
    """Per-fold and mean C-index for full / geno_missing / patho_missing inference."""
    reports = reports if reports is not None else train(cfg, manifest)
    samples = manifest.load_all()
    rows = []
    summary = []
    for mode in MODES:
        scores, literal = [], []
        for rep in reports:
            ev = evaluate(rep.model, [samples[i] for i in rep.valid_ids], mode, 0.0, cfg.n_s, cfg.seed)
            h = float("nan") if ev.c_index_harrell is None else ev.c_index_harrell
            scores.append(h)
            literal.append(ev.c_index_paper)
            rows.append(BenchRow(mode, str(rep.fold_index), h, ev.c_index_paper))
        summary.append(BenchRow(mode, "mean", float(np.mean(scores)), float(np.mean(literal)), float(np.std(scores))))
    return rows + summary


# --------------------------------------------------------------------------
# FLOP ablations

FLOPS_VARIANTS = (
    ("1", frozenset({"atsa", "pree", "lmf"})),
    ("2", frozenset({"atsa"})),
    ("3", frozenset({"pree"})),
    ("4", frozenset({"lmf"})),
    ("AdaMHF", frozenset()),
)


def reference_sample(cfg: RunConfig, n_p: int = 256, n_g: int = 6) -> SampleBag:
    rng = np.random.default_rng([cfg.seed, 99])
    return SampleBag("flops_ref", rng.normal(size=(n_p, cfg.d_model)).astype(np.float32),
                     rng.normal(size=(n_g, cfg.d_model)).astype(np.float32), 1, 0)


def flops_report(cfg: RunConfig, n_p: int = 256) -> list[dict]:
    """One forward pass per ablation variant; a set flag means the module is absent."""
    model = assemble_model(cfg)
    bag = reference_sample(cfg, n_p)
    rows = []
    for row_id, ablate in FLOPS_VARIANTS:
        with no_grad(), FlopLedger() as ledger:
            forward(model, bag.x_p, bag.x_g, ForwardContext(ablate=ablate))
        snap = flops_snapshot(ledger)
        rows.append({"id": row_id, "wo_atsa": int("atsa" in ablate), "wo_pree": int("pree" in ablate),
                     "wo_lmf": int("lmf" in ablate), "flops": snap["total"]})
    return rows


# --------------------------------------------------------------------------
# output files


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_fold_outputs(out_dir, reports: list[FoldReport]) -> None:
    out = Path(out_dir)
    routing_rows, atsa_rows = [], []
    for rep in reports:
        fold_dir = out / f"fold_{rep.fold_index}"
        _write_csv(fold_dir / "metrics.csv", ["epoch", "train_loss", "valid_loss", "c_index_harrell", "c_index_paper"],
                   [(e.epoch, e.train_loss, e.valid_loss, e.c_index_harrell, e.c_index_paper) for e in rep.epochs])
        km_rows = [(b, s, curve.group) for curve in rep.km for b, s in zip(curve.event_times, curve.survival)]
        _write_csv(fold_dir / "km.csv", ["bin", "survival", "group"], km_rows)
        if rep.model is not None:
            save_model(rep.model, fold_dir / "model.npz")
            (fold_dir / "valid_ids.txt").write_text("\n".join(rep.valid_ids) + "\n", encoding="utf-8")
        if rep.final_eval is not None:
            routing_rows += rep.final_eval.routing
            atsa_rows += [(sid, m, k, a, " ".join(map(str, kept))) for sid, m, k, a, kept in rep.final_eval.atsa]
    _write_csv(out / "routing_trace.csv", ["sample_id", "layer", "chosen_expert", "prob"], routing_rows)
    _write_csv(out / "atsa_trace.csv", ["sample_id", "modality", "K", "alpha", "kept_indices"], atsa_rows)
    write_summary(out / "summary.csv", reports)


def summary_rows(reports: list[FoldReport]) -> list[tuple]:
    rows = []
    for rep in reports:
        p = rep.log_rank.p_value if rep.log_rank else None
        chi = rep.log_rank.chi_square if rep.log_rank else None
        rows.append((str(rep.fold_index), rep.c_index_harrell, rep.c_index_paper, chi, p, rep.flops, rep.status))
    harrell = [r.c_index_harrell for r in reports if r.c_index_harrell is not None]
    literal = [r.c_index_paper for r in reports]
    if harrell:
        rows.append(("mean", float(np.mean(harrell)), float(np.mean(literal)), None, None,
                     int(np.mean([r.flops for r in reports])), ""))
        rows.append(("std", float(np.std(harrell)), float(np.std(literal)), None, None, None, ""))
    return rows


def write_summary(path, reports: list[FoldReport]) -> None:
    _write_csv(Path(path), ["fold", "c_index_harrell", "c_index_paper", "log_rank_chi2", "log_rank_p", "flops",
                            "status"], summary_rows(reports))


def write_bench(path, rows: list[BenchRow]) -> None:
    _write_csv(Path(path), ["mode", "fold", "c_index_harrell", "c_index_paper", "std_harrell"],
               [(r.mode, r.fold, r.c_index_harrell, r.c_index_paper, r.std_harrell if r.std_harrell is not None else "")
                for r in rows])


def write_flops(path, rows: list[dict]) -> None:
    _write_csv(Path(path), ["id", "wo_atsa", "wo_pree", "wo_lmf", "flops"],
               [(r["id"], r["wo_atsa"], r["wo_pree"], r["wo_lmf"], r["flops"]) for r in rows])


def save_model(model: Module, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **model.state_dict())


def load_model(cfg: RunConfig, path) -> AdaMHF:
    model = assemble_model(cfg)
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files})
    return model
