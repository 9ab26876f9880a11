"""Command-line entry point: ``splitfed <command> ...``."""
from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from . import client, harness, segnet, server, synthdata
from .errors import SplitFedError
from .training import TrainConfig

log = logging.getLogger("splitfed")


def _train_args(p: argparse.ArgumentParser, iters=True) -> None:
    if iters:
        p.add_argument("--iters", type=int, default=TrainConfig.iterations)
    p.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--eval-every", type=int, default=TrainConfig.eval_interval)


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(iterations=getattr(args, "iters", TrainConfig.iterations), batch_size=args.batch,
                       lr=args.lr, eval_interval=args.eval_every, seed=seed)


def _load_splits(paths) -> list[synthdata.DatasetSplit]:
    return [synthdata.load_split(p) for p in paths]


def cmd_serve(args) -> int:
    state = server.ServerState.from_files(args.decoder, args.source_encoder)
    host, port = client.parse_address(args.listen)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.serve(state, stop, (host, port), args.log,
                 ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]} decoder {state.decoder_hash.hex()}",
                                          flush=True))
    return 0


def cmd_client(args) -> int:
    split = synthdata.load_split(args.data)
    cfg = client.ClientConfig(args.centre, client.parse_address(args.server), args.variant,
                              "from_server" if args.init == "server" else "random",
                              _train_config(args, args.seed))
    out = Path(args.out)
    res = client.train_remote(cfg, split, out)
    res.trace.write_csv(out / f"{args.centre}_trace")
    if res.best_report is not None:
        print(f"{args.centre}: best mIoU {100 * res.best_report.miou:.2f} dice {100 * res.best_report.dice:.2f}")
    print(f"encoder written to {res.trace.checkpoint}")
    return 0


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in synthdata.default_centres(args.seed, args.scale):
        path = out / f"{split.domain_id}.sfds"
        synthdata.save_split(split, path)
        print(f"{path}: {len(split.train)} train / {len(split.test)} test")
        if args.pgm:
            for i, sample in enumerate(split.test[: args.pgm]):
                synthdata.export_pgm(sample, out / "pgm", f"{split.domain_id}_test{i:03d}")
    return 0


def cmd_train_source(args) -> int:
    split = synthdata.load_split(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc, dec, trace = harness.train_source(split, args.seed, _train_config(args, args.seed), args.variant, out)
    trace.write_csv(out / "source_trace")
    best = max(trace.evals, key=lambda e: e[1]) if trace.evals else None
    if best:
        print(f"source best mIoU {100 * best[1]:.2f} at iteration {best[0]}")
    print(f"checkpoints in {out}")
    return 0


def cmd_baseline(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(args.data)
    cfg = _train_config(args, args.seed)
    reports = {}
    if args.method == "indp":
        for s in splits:
            res = harness.run_indp(s, args.seed, cfg, args.variant)
            res.trace.write_csv(out / f"INDP_{s.domain_id}")
            reports[s.domain_id] = res.report
    elif args.method == "comb":
        reports, res = harness.run_comb(splits, args.seed, cfg, args.variant)
        res.trace.write_csv(out / "COMB_all")
    elif args.method == "fedavg":
        reports, res = harness.run_fedavg(splits, args.rounds or cfg.iterations, args.local_batches, args.seed,
                                          cfg, args.variant)
        res.trace.write_csv(out / "FedAvg_all")
    else:
        if not (args.source_encoder and args.source_decoder):
            raise SplitFedError("ftde needs --source-encoder and --source-decoder")
        enc = segnet.load_checkpoint(args.source_encoder)[0]
        dec = segnet.load_checkpoint(args.source_decoder)[0]
        reports, res = harness.run_ftde(enc, dec, splits, args.seed, cfg)
        res.trace.write_csv(out / "FtDe_targets")
    table = harness.ResultsTable(list(reports))
    method = {"indp": "INDP", "comb": "COMB", "fedavg": "FedAvg", "ftde": "FtDe"}[args.method]
    for c, r in reports.items():
        table.put(c, method, r)
    table.to_csv(out / "results.csv")
    for row in table.ordered():
        print(",".join(row.cells()))
    return 0


def cmd_experiment(args) -> int:
    base = Path(args.out)
    seeds = [args.seed + k for k in range(args.seeds_repeat)]
    tables = []
    for seed in seeds:
        out = base if len(seeds) == 1 else base / f"seed_{seed}"
        cfg = harness.ExperimentConfig(seed=seed, out_dir=out, scale=args.scale, variant=args.variant)
        res = harness.run_full_experiment(cfg)
        tables.append(res.table)
        print(f"seed {seed}: {res.seconds:.0f} s, results in {out / 'results.csv'}", flush=True)
        if res.decoder_hash_after != res.decoder_hash_before:
            print("warning: server decoder hash changed", file=sys.stderr)
    if len(seeds) > 1:
        agg = harness.aggregate(tables)
        agg.to_csv(base / "results.csv")
        (base / "report.md").write_text(
            f"# Mean over seeds {seeds[0]}..{seeds[-1]}\n\n## mIoU (%)\n\n{agg.markdown('miou')}\n\n"
            f"## Dice (%)\n\n{agg.markdown('dice')}\n")
        print(f"aggregate written to {base / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitfed", description="Split training with a frozen shared decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="host a frozen decoder")
    s.add_argument("--decoder", required=True)
    s.add_argument("--source-encoder")
    s.add_argument("--listen", default="127.0.0.1:7733")
    s.add_argument("--log")
    s.set_defaults(fn=cmd_serve)

    c = sub.add_parser("client", help="train a centre's encoder against a server")
    c.add_argument("--centre", required=True)
    c.add_argument("--server", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--variant", choices=sorted(segnet.VARIANT_WIDTHS), default="small")
    c.add_argument("--init", choices=("random", "server"), default="random")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    _train_args(c)
    c.set_defaults(fn=cmd_client)

    e = sub.add_parser("experiment", help="all methods on all synthetic centres")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--seeds-repeat", type=int, default=1)
    e.add_argument("--scale", choices=sorted(harness.SCALES), default="default")
    e.add_argument("--variant", choices=sorted(segnet.VARIANT_WIDTHS), default="small")
    e.set_defaults(fn=cmd_experiment)

    g = sub.add_parser("gen-data", help="write the synthetic centres as .sfds files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--pgm", type=int, default=0, metavar="N", help="also export N test samples per centre as PGM")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-source", help="joint training on the source centre")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=sorted(segnet.VARIANT_WIDTHS), default="small")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    _train_args(t)
    t.set_defaults(fn=cmd_train_source)

    b = sub.add_parser("baseline", help="run one comparison method")
    b.add_argument("method", choices=("indp", "comb", "fedavg", "ftde"))
    b.add_argument("--data", required=True, nargs="+", help=".sfds files, one per centre (targets only for ftde)")
    b.add_argument("--variant", choices=sorted(segnet.VARIANT_WIDTHS), default="small")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--rounds", type=int, help="FedAvg rounds (default: --iters)")
    b.add_argument("--local-batches", type=int, default=1)
    b.add_argument("--source-encoder")
    b.add_argument("--source-decoder")
    _train_args(b)
    b.set_defaults(fn=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (SplitFedError, ValueError, OSError) as exc:
        print(f"splitfed: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
