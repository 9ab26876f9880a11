"""Source training, comparison baselines and the full experiment.

Methods (rows of the results table):

* INDP: a full model per centre, trained only on that centre.
* COMB: one full model on the pooled training sets.
* FedAvg: one global model; every round each centre contributes the
  gradient of one local batch and the averaged gradient is applied once.
* FtDe: the source encoder frozen, one shared decoder fine-tuned on the targets.
* RandEn / FtEn: per-centre encoders trained through the server against the
  frozen source decoder, from random or from source weights.
"""
from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import client, losses, nn, segnet, server, synthdata, wire
from .errors import ConfigError
from .nn import ParamSet
from .synthdata import DatasetSplit, Sample
from .training import TrainConfig, TrainTrace, batch_schedule, evaluate_local, stack

log = logging.getLogger("splitfed.harness")

METHODS = ("INDP", "COMB", "FedAvg", "FtDe", "RandEn", "FtEn")
NOT_APPLICABLE_ON_SOURCE = ("FtDe", "FtEn")


def centre_seed(master: int, centre_id: str) -> int:
    """Per-centre seed shared by every method, so all methods see the same batches."""
    ss = np.random.SeedSequence([master, zlib.crc32(centre_id.encode())])
    return int(ss.generate_state(1)[0] >> 1)


# ---------------------------------------------------------------- joint training


@dataclass
class JointResult:
    encoder: ParamSet
    decoder: ParamSet
    report: losses.MetricReport | None
    trace: TrainTrace


def train_joint(encoder: ParamSet, decoder: ParamSet, train: Sequence[Sample], eval_samples: Sequence[Sample],
                cfg: TrainConfig, train_encoder: bool = True, train_decoder: bool = True) -> JointResult:
    """Monolithic training of encoder and/or decoder; keeps the best-mIoU checkpoint."""
    if not train:
        raise ConfigError("training split is empty")
    images, masks = stack(train)
    trace = TrainTrace()
    enc_state = nn.AdamState(lr=cfg.lr)
    dec_state = nn.AdamState(lr=cfg.lr)
    best = JointResult(encoder, decoder, None, trace)
    for it, idx in enumerate(batch_schedule(len(images), cfg.batch_size, cfg.iterations, cfg.seed)):
        latents, enc_cache = segnet.encoder_forward(encoder, images[idx])
        logits, dec_cache = segnet.decoder_forward(decoder, latents)
        res = losses.bce_from_logits(logits, masks[idx])
        trace.record_loss(it, res.loss)
        d_latent, d_dec = segnet.decoder_backward(decoder, dec_cache, res.d_logits, param_grads=train_decoder)
        lr = cfg.lr_at(it)
        if train_encoder:
            enc_state.lr = lr
            encoder, enc_state = nn.adam_step(encoder, segnet.encoder_backward(encoder, enc_cache, d_latent), enc_state)
        if train_decoder:
            dec_state.lr = lr
            decoder, dec_state = nn.adam_step(decoder, d_dec, dec_state)
        if eval_samples and cfg.eval_due(it):
            report = evaluate_local(encoder, decoder, eval_samples)
            trace.record_eval(it + 1, report)
            if best.report is None or report.miou > best.report.miou:
                best = JointResult(encoder, decoder, report, trace)
    if best.report is None:
        best = JointResult(encoder, decoder, None, trace)
    return best


def _fresh_model(spec: segnet.EncoderSpec, seed: int) -> tuple[ParamSet, ParamSet]:
    encoder, latent = segnet.build_encoder(spec, seed)
    return encoder, segnet.build_decoder(segnet.DecoderSpec(latent), seed + 1)


def train_source(split: DatasetSplit, seed: int, cfg: TrainConfig | None = None, variant: str = "small",
                 out_dir=None) -> tuple[ParamSet, ParamSet, TrainTrace]:
    """Joint encoder+decoder training on the source centre.

    With ``out_dir`` the best checkpoints are written as
    ``source_encoder.sfps`` and ``source_decoder.sfps``.
    """
    cfg = replace(cfg or TrainConfig(), seed=seed)
    spec = segnet.EncoderSpec(variant)
    encoder, decoder = _fresh_model(spec, seed)
    res = train_joint(encoder, decoder, split.train, split.test, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        segnet.save_checkpoint(res.encoder, out_dir / "source_encoder.sfps", spec.describe())
        segnet.save_checkpoint(res.decoder, out_dir / "source_decoder.sfps",
                               segnet.decoder_spec_from_params(res.decoder, spec.image_size).describe())
        res.trace.checkpoint = out_dir / "source_decoder.sfps"
    return res.encoder, res.decoder, res.trace


def run_indp(split: DatasetSplit, seed: int, cfg: TrainConfig | None = None,
             variant: str = "small") -> JointResult:
    cfg = replace(cfg or TrainConfig(), seed=seed)
    encoder, decoder = _fresh_model(segnet.EncoderSpec(variant), seed)
    return train_joint(encoder, decoder, split.train, split.test, cfg)


def _per_centre(encoder, decoder, splits) -> dict[str, losses.MetricReport]:
    return {s.domain_id: evaluate_local(encoder, decoder, s.test) for s in splits if s.test}


def run_comb(splits: Sequence[DatasetSplit], seed: int, cfg: TrainConfig | None = None,
             variant: str = "small") -> tuple[dict[str, losses.MetricReport], JointResult]:
    """One model on the pooled training sets, scored per centre."""
    cfg = replace(cfg or TrainConfig(), seed=seed)
    pooled = [s for split in splits for s in split.train]
    pooled_test = [s for split in splits for s in split.test]
    encoder, decoder = _fresh_model(segnet.EncoderSpec(variant), seed)
    res = train_joint(encoder, decoder, pooled, pooled_test, cfg)
    return _per_centre(res.encoder, res.decoder, splits), res


def average_gradients(grads: Sequence[dict]) -> dict:
    """Equal-weight elementwise mean, accumulated in float64."""
    n = len(grads)
    out = {}
    for name in grads[0]:
        acc = np.zeros(grads[0][name].shape, dtype=np.float64)
        for g in grads:
            acc += g[name]
        out[name] = (acc / n).astype(nn.DTYPE)
    return out


def full_gradient(encoder: ParamSet, decoder: ParamSet, images, masks) -> tuple[float, dict]:
    """Loss and gradient of every encoder and decoder parameter for one batch."""
    latents, enc_cache = segnet.encoder_forward(encoder, images)
    logits, dec_cache = segnet.decoder_forward(decoder, latents)
    res = losses.bce_from_logits(logits, masks)
    d_latent, d_dec = segnet.decoder_backward(decoder, dec_cache, res.d_logits, param_grads=True)
    d_enc = segnet.encoder_backward(encoder, enc_cache, d_latent)
    return res.loss, {**d_enc, **d_dec}


def run_fedavg(splits: Sequence[DatasetSplit], rounds: int, local_batches: int, seed: int,
               cfg: TrainConfig | None = None, variant: str = "small",
               centre_seeds: Sequence[int] | None = None) -> tuple[dict[str, losses.MetricReport], JointResult]:
    """Round-wise gradient averaging over centres.

    Each round every centre computes the gradient on ``local_batches`` of
    its own batches (averaged locally), the per-centre gradients are averaged
    with equal weights and one Adam step updates the global model.
    ``centre_seeds`` fixes each centre's batch order; by default it is
    derived from ``seed`` and the centre id.
    """
    if len(splits) < 2:
        raise ConfigError("FedAvg needs at least two centres")
    if rounds <= 0 or local_batches <= 0:
        raise ConfigError("rounds and local_batches must be positive")
    cfg = replace(cfg or TrainConfig(), seed=seed, iterations=rounds)
    if centre_seeds is None:
        centre_seeds = [centre_seed(seed, s.domain_id) for s in splits]
    data = [stack(s.train) for s in splits]
    schedules = [batch_schedule(len(x), cfg.batch_size, rounds * local_batches, cs)
                 for (x, _), cs in zip(data, centre_seeds)]
    model = _fresh_model(segnet.EncoderSpec(variant), seed)
    params = model[0].merged(model[1])
    state = nn.AdamState(lr=cfg.lr)
    pooled_test = [s for split in splits for s in split.test]
    trace = TrainTrace()
    best = None
    for r in range(rounds):
        centre_grads, round_loss = [], 0.0
        for (x, y), sched in zip(data, schedules):
            local = []
            for _ in range(local_batches):
                idx = next(sched)
                loss, g = full_gradient(model[0], model[1], x[idx], y[idx])
                round_loss += loss
                local.append(g)
            centre_grads.append(local[0] if local_batches == 1 else average_gradients(local))
        trace.record_loss(r, round_loss / (len(data) * local_batches))
        state.lr = cfg.lr_at(r)
        params, state = nn.adam_step(params, average_gradients(centre_grads), state)
        model = (params.subset(model[0].names), params.subset(model[1].names))
        if pooled_test and cfg.eval_due(r):
            report = evaluate_local(*model, pooled_test)
            trace.record_eval(r + 1, report)
            if best is None or report.miou > best.report.miou:
                best = JointResult(*model, report, trace)
    if best is None:
        best = JointResult(*model, None, trace)
    return _per_centre(best.encoder, best.decoder, splits), best


def run_ftde(source_encoder: ParamSet, source_decoder: ParamSet, splits: DatasetSplit | Sequence[DatasetSplit],
             seed: int, cfg: TrainConfig | None = None) -> tuple[dict[str, losses.MetricReport], JointResult]:
    """Fine-tune one shared decoder on the target centres with the source encoder frozen.

    All targets fine-tune the same copy of the decoder (on their pooled
    training sets), so the system still holds a single decoder. Each centre
    is scored with that decoder.
    """
    if isinstance(splits, DatasetSplit):
        splits = [splits]
    cfg = replace(cfg or TrainConfig(), seed=seed)
    pooled = [s for split in splits for s in split.train]
    pooled_test = [s for split in splits for s in split.test]
    res = train_joint(source_encoder, source_decoder, pooled, pooled_test, cfg, train_encoder=False)
    return _per_centre(res.encoder, res.decoder, splits), res


# ---------------------------------------------------------------- results


@dataclass
class Row:
    centre: str
    method: str
    miou: float | None = None
    dice: float | None = None
    n_test: int = 0
    note: str = ""

    def cells(self) -> list[str]:
        fmt = (lambda v: "N/A" if v is None else f"{100 * v:.1f}")
        return [self.centre, self.method, fmt(self.miou), fmt(self.dice), str(self.n_test), self.note]


CSV_HEADER = ["centre", "method", "miou", "dice", "n_test", "note"]


@dataclass
class ResultsTable:
    centres: list[str]
    rows: dict[tuple[str, str], Row] = field(default_factory=dict)

    def put(self, centre: str, method: str, report: losses.MetricReport | None, note: str = "") -> None:
        if report is None:
            self.rows[(centre, method)] = Row(centre, method, note=note or "N/A")
        else:
            self.rows[(centre, method)] = Row(centre, method, report.miou, report.dice, report.n_images, note)

    def get(self, centre: str, method: str) -> Row:
        return self.rows[(centre, method)]

    def ordered(self) -> list[Row]:
        return [self.rows[(c, m)] for c in self.centres for m in METHODS if (c, m) in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            w.writerows(r.cells() for r in self.ordered())

    @classmethod
    def from_csv(cls, path) -> "ResultsTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        centres = list(dict.fromkeys(r["centre"] for r in rows))
        table = cls(centres)
        for r in rows:
            val = (lambda s: None if s == "N/A" else float(s) / 100)
            table.rows[(r["centre"], r["method"])] = Row(r["centre"], r["method"], val(r["miou"]),
                                                         val(r["dice"]), int(r["n_test"]), r["note"])
        return table

    def markdown(self, metric: str = "miou") -> str:
        head = "| Method | " + " | ".join(self.centres) + " |"
        lines = [head, "|" + "---|" * (len(self.centres) + 1)]
        for m in METHODS:
            cells = []
            for c in self.centres:
                row = self.rows.get((c, m))
                v = None if row is None else getattr(row, metric)
                cells.append("N/A" if v is None else f"{100 * v:.1f}")
            lines.append(f"| {m} | " + " | ".join(cells) + " |")
        return "\n".join(lines)


def count_decoder_params(params: ParamSet) -> int:
    return sum(int(a.size) for name, a in params.items() if name.startswith(segnet.DECODER_PREFIX))


@dataclass
class StorageLedger:
    """Which checkpoint each party must keep to serve its centre, per method."""

    holdings: dict[str, list[tuple[str, Path]]] = field(default_factory=dict)

    def hold(self, method: str, holder: str, path: Path) -> None:
        self.holdings.setdefault(method, []).append((holder, Path(path)))

    def decoder_params(self, method: str) -> int:
        return sum(count_decoder_params(nn.load_params(p)) for _, p in self.holdings.get(method, []))

    def decoders(self, method: str, one_decoder: int) -> float:
        return self.decoder_params(method) / one_decoder

    def to_csv(self, path, one_decoder: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "holders", "decoder_params", "decoders"])
            for method in METHODS:
                if method in self.holdings:
                    n = self.decoder_params(method)
                    w.writerow([method, len(self.holdings[method]), n, f"{n / one_decoder:g}"])


def read_storage_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["method"]: float(r["decoders"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------- full experiment


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: Path = Path("runs/experiment")
    scale: str = "default"
    variant: str = "small"
    train: TrainConfig = field(default_factory=TrainConfig)
    fedavg_local_batches: int = 1
    centres: tuple[DatasetSplit, ...] | None = None

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {sorted(SCALES)}, got {self.scale!r}")

    def splits(self) -> list[DatasetSplit]:
        if self.centres is not None:
            return list(self.centres)
        return synthdata.default_centres(self.seed, SCALES[self.scale]["data"])

    def train_config(self) -> TrainConfig:
        s = SCALES[self.scale]
        if self.scale == "default":
            return self.train
        return replace(self.train, iterations=s["iterations"], decay_interval=s["decay_interval"],
                       eval_interval=s["eval_interval"])


SCALES = {
    "default": {"data": 1.0},
    "small": {"data": 0.25, "iterations": 200, "decay_interval": 100, "eval_interval": 50},
}


@dataclass
class ExperimentResult:
    table: ResultsTable
    storage: dict[str, float]
    decoder_hash_before: bytes
    decoder_hash_after: bytes | None
    seconds: float


def _guard(table: ResultsTable, centre: str, method: str, fn: Callable[[], losses.MetricReport | None],
           note: str = "") -> None:
    try:
        table.put(centre, method, fn(), note)
    except Exception as exc:  # a failed sub-run becomes an N/A cell
        log.exception("%s on %s failed", method, centre)
        table.put(centre, method, None, f"error: {type(exc).__name__}: {exc}")


def run_full_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Every method on every centre; writes results, traces, checkpoints and a report."""
    t0 = time.perf_counter()
    out = Path(config.out_dir)
    ckpt, traces = out / "checkpoints", out / "traces"
    ckpt.mkdir(parents=True, exist_ok=True)
    traces.mkdir(parents=True, exist_ok=True)
    cfg = config.train_config()
    spec = segnet.EncoderSpec(config.variant)
    splits = config.splits()
    source, targets = splits[0], splits[1:]
    ids = [s.domain_id for s in splits]
    seeds = {s.domain_id: centre_seed(config.seed, s.domain_id) for s in splits}
    table = ResultsTable(ids)
    storage = StorageLedger()

    log.info("training source on %s", source.domain_id)
    src_enc, src_dec, src_trace = train_source(source, seeds[source.domain_id], cfg, config.variant, ckpt)
    src_trace.write_csv(traces / f"INDP_{source.domain_id}")
    src_dec_path = ckpt / "source_decoder.sfps"
    source_hash = wire.decoder_hash(src_dec)
    one_decoder = count_decoder_params(src_dec)
    source_report = evaluate_local(src_enc, src_dec, source.test)
    table.put(source.domain_id, "INDP", source_report, "source model")
    table.put(source.domain_id, "RandEn", source_report, "source model")
    for m in NOT_APPLICABLE_ON_SOURCE:
        table.put(source.domain_id, m, None)
    for m in ("INDP", "RandEn", "FtEn"):
        storage.hold(m, source.domain_id, src_dec_path)

    # split training over loopback sockets against the frozen source decoder
    state = server.ServerState.create(src_dec, spec.image_size, src_enc)
    srv, thread = server.start_server(state)
    hash_after = None
    try:
        for split in targets:
            for method, mode in (("RandEn", "random"), ("FtEn", "from_server")):
                def remote(split=split, method=method, mode=mode):
                    ccfg = client.ClientConfig(split.domain_id, srv.address, config.variant, mode,
                                               replace(cfg, seed=seeds[split.domain_id]))
                    res = client.train_remote(ccfg, split, ckpt / method)
                    res.trace.write_csv(traces / f"{method}_{split.domain_id}")
                    storage.hold(method, split.domain_id, res.trace.checkpoint)
                    return res.best_report
                _guard(table, split.domain_id, method, remote)
        with client.Connection(srv.address, "harness") as conn:
            hash_after = conn.decoder_hash()
    finally:
        srv.stop()
        thread.join()
    if hash_after != source_hash:
        log.error("server decoder hash changed during target training")

    for split in targets:
        def indp(split=split):
            res = run_indp(split, seeds[split.domain_id], cfg, config.variant)
            res.trace.write_csv(traces / f"INDP_{split.domain_id}")
            path = ckpt / "INDP" / f"{split.domain_id}_model.sfps"
            path.parent.mkdir(exist_ok=True)
            nn.save_params(res.encoder.merged(res.decoder), path)
            storage.hold("INDP", split.domain_id, path)
            return res.report
        _guard(table, split.domain_id, "INDP", indp)

    def comb():
        reports, res = run_comb(splits, config.seed, cfg, config.variant)
        res.trace.write_csv(traces / "COMB_all")
        path = ckpt / "COMB_model.sfps"
        nn.save_params(res.encoder.merged(res.decoder), path)
        storage.hold("COMB", "pooled", path)
        for c in ids:
            table.put(c, "COMB", reports.get(c))
    try:
        comb()
    except Exception as exc:
        for c in ids:
            table.put(c, "COMB", None, f"error: {type(exc).__name__}: {exc}")

    def fedavg():
        reports, res = run_fedavg(splits, cfg.iterations, config.fedavg_local_batches, config.seed, cfg,
                                  config.variant, [seeds[c] for c in ids])
        res.trace.write_csv(traces / "FedAvg_all")
        path = ckpt / "FedAvg_model.sfps"
        nn.save_params(res.encoder.merged(res.decoder), path)
        # every centre keeps a copy of the global model to run inference locally
        for c in ids:
            storage.hold("FedAvg", c, path)
            table.put(c, "FedAvg", reports.get(c))
    try:
        fedavg()
    except Exception as exc:
        for c in ids:
            table.put(c, "FedAvg", None, f"error: {type(exc).__name__}: {exc}")

    def ftde():
        reports, res = run_ftde(src_enc, src_dec, targets, config.seed, cfg)
        res.trace.write_csv(traces / "FtDe_targets")
        path = ckpt / "FtDe_decoder.sfps"
        nn.save_params(res.decoder, path)
        # the fine-tuned decoder replaces the source one on the server
        storage.hold("FtDe", "server", path)
        for split in targets:
            table.put(split.domain_id, "FtDe", reports.get(split.domain_id))
    try:
        ftde()
    except Exception as exc:
        for split in targets:
            table.put(split.domain_id, "FtDe", None, f"error: {type(exc).__name__}: {exc}")

    table.to_csv(out / "results.csv")
    storage.to_csv(out / "storage.csv", one_decoder)
    storage_summary = {m: storage.decoders(m, one_decoder) for m in storage.holdings}
    seconds = time.perf_counter() - t0
    write_report(out / "report.md", table, storage_summary, config, source_hash, hash_after, seconds)
    (out / "run.json").write_text(json.dumps({
        "seed": config.seed, "scale": config.scale, "variant": config.variant,
        "seconds": round(seconds, 1), "decoder_hash": source_hash.hex(),
        "decoder_hash_after": None if hash_after is None else hash_after.hex(),
    }, indent=2))
    return ExperimentResult(table, storage_summary, source_hash, hash_after, seconds)


def write_report(path, table: ResultsTable, storage: dict[str, float], config: ExperimentConfig,
                 hash_before: bytes, hash_after: bytes | None, seconds: float) -> None:
    lines = [
        f"# Split-training experiment, seed {config.seed}",
        "",
        f"Scale `{config.scale}`, encoder `{config.variant}`, {seconds:.0f} s.",
        "",
        "## mIoU (%)",
        "",
        table.markdown("miou"),
        "",
        "## Dice (%)",
        "",
        table.markdown("dice"),
        "",
        "## Decoder storage across centres (in decoders)",
        "",
        "| Method | Decoders |",
        "|---|---|",
        *[f"| {m} | {storage[m]:g} |" for m in METHODS if m in storage],
        "",
        f"Server decoder SHA-256 before target training: `{hash_before.hex()}`",
        f"after: `{'unavailable' if hash_after is None else hash_after.hex()}`",
        "",
    ]
    Path(path).write_text("\n".join(lines))


def aggregate(tables: Sequence[ResultsTable]) -> ResultsTable:
    """Mean over seeds per cell; a cell is N/A if any seed has N/A."""
    out = ResultsTable(tables[0].centres)
    for key in tables[0].rows:
        rows = [t.rows.get(key) for t in tables]
        if any(r is None or r.miou is None for r in rows):
            out.rows[key] = Row(*key, note="N/A")
        else:
            out.rows[key] = Row(*key, float(np.mean([r.miou for r in rows])), float(np.mean([r.dice for r in rows])),
                                rows[0].n_test, f"mean of {len(rows)} seeds")
    return out
