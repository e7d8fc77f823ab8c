"""Command-line runner: ``caplab <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure, 3 a bound check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from caplab import capacity, mcd, tasks
from caplab.config import CONFIG_NAME, RunConfig, load_config
from caplab.errors import CaplabError, ConfigurationError, FormatError, InputError
from caplab.model import Model, load_checkpoint
from caplab.objective import CapacityTarget, evaluate, train
from caplab.toydata import ToySpec, Utterance, generate_dataset, load, save

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BOUNDS = 0, 1, 2, 3
CHECKPOINT_NAME = "model.capckpt"
METRICS_NAME = "metrics.csv"
SUMMARY_FIELDS = ("cell", "status", "latent_dim", "capacity", "capacity_high", "capacity_low",
                  "fixed_beta", "heldout_recon", "heldout_R", "trailing_R", "final_beta",
                  "ref_dist", "xsamp_dist")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args):
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config PATH is required")
    return load_config(args.config, args.seed)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


# -- commands -------------------------------------------------------------------------------

def cmd_gen_data(args):
    out = _out_dir(args)
    if args.config:
        cfg = _run_config(args)
        spec, n = cfg.data.toy_spec(), cfg.data.num_utterances
        if args.seed is not None:
            spec.seed = args.seed
        cfg.save(out)
    else:
        if args.seed is None:
            raise UsageError("a seed is required: pass --seed or --config")
        spec, n = ToySpec(seed=args.seed), args.n
    data = generate_dataset(spec, args.n or n, debug=args.debug)
    path = out / "dataset.captoy"
    save(path, spec, data)
    print(path)
    return EXIT_OK


def _train_run(cfg: RunConfig, out: Path):
    spec, train_set, held = cfg.data.load()
    cfg = cfg.resolved(spec)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    model = Model.init(cfg.model, cfg.seed)
    result = train(model, train_set, cfg.target, cfg.train, seed=cfg.seed,
                   checkpoint_path=out / CHECKPOINT_NAME, metrics_path=out / METRICS_NAME)
    recon, rate = evaluate(model, held, seed=cfg.seed, samples=4) if held else (math.nan,) * 2
    window = min(1000, len(result.metrics))
    last = result.metrics[-1]
    return model, held, {
        "heldout_recon": recon, "heldout_R": rate,
        "trailing_R": result.trailing("R", window),
        "final_beta": last.beta if cfg.model.variational else math.nan,
    }


def cmd_train(args):
    cfg = _run_config(args)
    out = _out_dir(args)
    _, _, stats = _train_run(cfg, out)
    text = "".join(f"{k}={v!r}\n" for k, v in stats.items())
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_model_and_data(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint PATH is required")
    model = load_checkpoint(args.checkpoint)
    if args.data:
        _, data = load(args.data)
    elif args.config:
        _, _, data = _run_config(args).data.load()
    else:
        raise UsageError("--data PATH or --config PATH is required")
    if args.limit:
        data = data[:args.limit]
    return model, data


def cmd_eval_capacity(args):
    model, data = _load_model_and_data(args)
    if model.config.hierarchical:
        result = capacity.verify_hier_bounds(model, data, seed=args.seed or 0)
        text = result.to_text()
    elif args.method == "monte_carlo" or model.config.latent_dim > 2:
        text = capacity.mi_monte_carlo(model, data, args.samples, seed=args.seed or 0).to_text()
    else:
        text = capacity.mi_quadrature(model, data, args.resolution).to_text()
    if args.out:
        (_out_dir(args) / "capacity.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_bounds(args):
    model, data = _load_model_and_data(args)
    if model.config.hierarchical:
        result = capacity.verify_hier_bounds(model, data, seed=args.seed or 0,
                                             resolution=args.resolution)
    else:
        result = capacity.verify_flat_bounds(model, data, args.resolution)
    text = result.to_text()
    if args.out:
        (_out_dir(args) / "bounds.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if result.passed else EXIT_BOUNDS


def _as_utterances(seqs, y_text, y_speaker, channels):
    nan = float("nan")
    return [Utterance(np.asarray(s), int(t), int(sp), nan, nan, np.zeros(channels))
            for s, t, sp in zip(seqs, y_text, y_speaker)]


def _spec_for(model):
    c = model.config
    return ToySpec(c.channels, c.num_text_classes, c.num_speakers, seed=0)


def cmd_transfer(args):
    model, data = _load_model_and_data(args)
    out = _out_dir(args)
    seed = args.seed or 0
    max_len = args.max_len or 2 * _spec_for(model).max_length
    y_t, y_s = tasks.task_targets(args.task, data, model.config.num_text_classes,
                                  model.config.num_speakers, seed)
    outputs = tasks.generate(model, data, y_t, y_s, args.level, args.num_samples, seed, max_len)
    summary = tasks.evaluate_transfer(model, data, args.task, args.level, args.num_samples,
                                      seed, max_len, capacity=args.capacity_label,
                                      generator=lambda *_: outputs)
    flat = [s for outs in outputs for s in outs]
    reps = args.num_samples
    utts = _as_utterances(flat, np.repeat(y_t, reps), np.repeat(y_s, reps), model.config.channels)
    save(out / "transfer.captoy", _spec_for(model), utts)
    (out / "transfer.csv").write_text(tasks.summary_csv([summary]))
    sys.stdout.write(tasks.summary_csv([summary]))
    return EXIT_OK


def cmd_sample(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint PATH is required")
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    if args.config:
        spec = _run_config(args).data.toy_spec()
    elif args.data:
        spec = load(args.data)[0]
    else:
        spec = _spec_for(model)
    if not 0 <= args.text < spec.num_text_classes:
        raise UsageError(f"--text must lie in [0, {spec.num_text_classes})")
    max_len = args.max_len or 2 * spec.max_length
    seqs = tasks.prior_sample(model, args.text, args.speaker, args.n, args.seed or 0, max_len)
    utts = _as_utterances(seqs, [args.text] * len(seqs), [args.speaker] * len(seqs),
                          model.config.channels)
    if utts:
        save(out / "samples.captoy", spec, utts)
    lo, hi = tasks.length_range(spec.base_lengths[args.text])
    rows = [[i, args.text, args.speaker, len(s), int(lo <= len(s) <= hi)]
            for i, s in enumerate(seqs)]
    _write_csv(out / "samples.csv", ("index", "y_text", "y_speaker", "length", "length_ok"), rows)
    print(f"length_consistency={tasks.length_consistency(seqs, args.text, spec.base_lengths)!r}")
    return EXIT_OK


def _resolve_item(ref, cache):
    """``file.wav`` or ``dataset.captoy#index``."""
    path, sep, index = ref.partition("#")
    if not sep:
        return Path(path)
    if path not in cache:
        cache[path] = load(path)[1]
    data = cache[path]
    try:
        return data[int(index)]
    except (ValueError, IndexError) as exc:
        raise InputError(f"{ref}: no utterance at index {index!r}") from exc


def cmd_mcd_dtw(args):
    pairs = []
    if args.pairs:
        with open(args.pairs, newline="") as fh:
            for row in csv.reader(fh):
                if row and row[0] != "id_a":
                    pairs.append((row[0], row[1]))
    if args.items:
        if len(args.items) % 2:
            raise UsageError("mcd-dtw takes items in pairs: A B [A B ...]")
        pairs += list(zip(args.items[::2], args.items[1::2]))
    if not pairs:
        raise UsageError("no pairs given")
    cache = {}
    rows = []
    for a, b in pairs:
        value = mcd.mcd_dtw(_resolve_item(a, cache), _resolve_item(b, cache), args.penalty,
                            args.denominator, args.scaled)
        rows.append([a, b, repr(value)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id_a", "id_b", "mcd_dtw"))
    w.writerows(rows)
    if args.out:
        (_out_dir(args) / "mcd.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def sweep_cells(cfg: RunConfig):
    """Expand the ``[sweep]`` grid into ``(name, RunConfig)`` pairs."""
    s = cfg.sweep
    dims = s.latent_dim or [cfg.model.latent_dim]
    cells = []
    for dim in dims:
        model = replace(cfg.model, latent_dim=dim)
        base = replace(cfg, model=model)
        if s.capacity_pairs:
            for h, lo in s.capacity_pairs:
                cells.append((f"dim{dim}_CH{h!r}_CL{lo!r}",
                              replace(base, target=CapacityTarget.hier(h, lo))))
        elif s.capacity:
            for c in s.capacity:
                cells.append((f"dim{dim}_C{c!r}", replace(base, target=CapacityTarget.flat(c))))
        elif s.fixed_beta:
            for b in s.fixed_beta:
                cells.append((f"dim{dim}_beta{b!r}",
                              replace(base, train=replace(cfg.train, fixed_beta=b))))
        else:
            cells.append((f"dim{dim}", base))
    return cells


def run_cell(name, cfg: RunConfig, out: Path):
    row = dict.fromkeys(SUMMARY_FIELDS, "")
    row["cell"] = name
    row["latent_dim"] = cfg.model.latent_dim
    t = cfg.target
    row["capacity"], row["capacity_high"], row["capacity_low"] = (
        "" if v is None else v for v in (t.capacity, t.capacity_high, t.capacity_low))
    row["fixed_beta"] = "" if cfg.train.fixed_beta is None else cfg.train.fixed_beta
    try:
        model, held, stats = _train_run(cfg, out / name)
        row.update(stats)
        if cfg.sweep.transfer and held:
            level = "via_z_H" if cfg.model.hierarchical else "flat"
            max_len = 2 * cfg.data.toy_spec().max_length
            summ = tasks.evaluate_transfer(model, held, "same_text", level,
                                           cfg.sweep.transfer_samples, cfg.seed, max_len)
            row["ref_dist"], row["xsamp_dist"] = summ.ref_dist, summ.xsamp_dist
        row["status"] = "ok"
    except (CaplabError, FloatingPointError, ValueError) as exc:
        row["status"] = f"failed: {exc}"
    return row


def _fmt_cell(v):
    return repr(v) if isinstance(v, float) else str(v)


def cmd_sweep(args):
    cfg = _run_config(args)
    if cfg.sweep.empty:
        raise UsageError("the config has no [sweep] grid")
    out = _out_dir(args)
    cfg.save(out)
    cells = sweep_cells(cfg)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(run_cell, n, c, out) for n, c in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [run_cell(n, c, out) for n, c in cells]
    _write_csv(out / "summary.csv", SUMMARY_FIELDS,
               [[_fmt_cell(r[k]) for k in SUMMARY_FIELDS] for r in rows])
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"cell {r['cell']} {r['status']}", file=sys.stderr)
    print(out / "summary.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="caplab", description="Capacity-constrained latent model laboratory.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=False):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--jobs", type=int, default=1, metavar="N")
        if data:
            sp.add_argument("--checkpoint", metavar="PATH")
            sp.add_argument("--data", metavar="PATH", help="dataset file (default: held-out split of --config)")
            sp.add_argument("--limit", type=int, default=0, help="use only the first N utterances")

    sp = sub.add_parser("gen-data", help="write a toy dataset file")
    common(sp)
    sp.add_argument("--n", type=int, default=0, help="number of utterances")
    sp.add_argument("--debug", action="store_true", help="unit amplitude and tempo, no noise")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model from a config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval-capacity", help="rate and mutual-information report")
    common(sp, data=True)
    sp.add_argument("--method", choices=("quadrature", "monte_carlo"), default="quadrature")
    sp.add_argument("--resolution", type=int, default=capacity.DEFAULT_RESOLUTION)
    sp.add_argument("--samples", type=int, default=64, help="Monte Carlo samples per example")
    sp.set_defaults(func=cmd_eval_capacity)

    sp = sub.add_parser("verify-bounds", help="check the information bounds; exit 3 on violation")
    common(sp, data=True)
    sp.add_argument("--resolution", type=int, default=capacity.DEFAULT_RESOLUTION)
    sp.set_defaults(func=cmd_verify_bounds)

    sp = sub.add_parser("transfer", help="transfer held-out references and score them")
    common(sp, data=True)
    sp.add_argument("--task", choices=tasks.TASKS, default="same_text")
    sp.add_argument("--level", choices=tasks.LEVELS, default="flat")
    sp.add_argument("--num-samples", type=int, default=tasks.DEFAULT_SAMPLES)
    sp.add_argument("--max-len", type=int, default=0)
    sp.add_argument("--capacity-label", default="", help="value for the capacity column")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("sample", help="decode draws from the prior")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--data", metavar="PATH", help="dataset whose base lengths define the length window")
    sp.add_argument("--text", type=int, required=True)
    sp.add_argument("--speaker", type=int, required=True)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--max-len", type=int, default=0)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("mcd-dtw", help="MCD-DTW between WAV files or dataset#index items")
    common(sp)
    sp.add_argument("items", nargs="*", help="A B [A B ...]")
    sp.add_argument("--pairs", metavar="CSV", help="CSV of id_a,id_b rows")
    sp.add_argument("--penalty", type=float, default=mcd.WARP_PENALTY)
    sp.add_argument("--denominator", choices=mcd.DENOMINATORS, default="path")
    sp.add_argument("--scaled", action="store_true", help="multiply by 10*sqrt(2)/ln(10)")
    sp.set_defaults(func=cmd_mcd_dtw)

    sp = sub.add_parser("sweep", help="train every cell of the [sweep] grid")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().strip())
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CaplabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
