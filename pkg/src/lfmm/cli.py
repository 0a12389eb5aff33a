"""Command-line driver: ``lfmm {simulate,fit,summarize,diagnose,predict}``."""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import ScenarioConfig, generate_synthetic, load_dataset, write_dataset
from .exceptions import LFMMError
from .io import RunConfig, SampleWriter, read_config, read_samples, write_summary
from .posterior import (
    anova_from_store,
    cluster_count_probabilities,
    format_geweke,
    geweke_diagnostic,
    posterior_predictive,
)
from .sampler import GibbsSampler, SamplerConfig

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = _Parser(prog="lfmm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="write a synthetic benchmark dataset")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--truth", help="also write the generating truth as JSON")
    sim.add_argument("--n", type=int, default=50, help="number of subjects")
    sim.add_argument("--trials", type=int, default=5)
    sim.add_argument("--levels", type=_int_list, default=(2, 2, 3, 3, 3, 3, 3, 3, 3, 3))
    sim.add_argument("--sigma-eps2", type=float, default=1.0)
    sim.add_argument("--sigma-us2", type=float, default=0.1)
    sim.add_argument("--sigma-ua2", type=float, default=2.0)

    fit = sub.add_parser("fit", help="run the sampler and write draws")
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--config")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--chains", type=int)
    fit.add_argument("--no-random-effects", action="store_true")
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--burnin", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--warmup", type=int, help="opening iterations with frozen random effects")
    fit.add_argument("--alphabet", type=_int_list, help="label alphabet size per predictor")

    summ = sub.add_parser("summarize", help="write posterior summary tables")
    summ.add_argument("--samples", required=True)
    summ.add_argument("--out", help="CSV file for the full summary table")
    summ.add_argument("--predictor", type=int, help="print cluster-count probabilities of this predictor (1-based)")
    summ.add_argument("--level", type=float, default=0.95)
    summ.add_argument("--no-interactions", action="store_true")

    diag = sub.add_parser("diagnose", help="Geweke statistics of the monitored scalars")
    diag.add_argument("--samples", required=True)
    diag.add_argument("--out")
    diag.add_argument("--first", type=float, default=0.1)
    diag.add_argument("--last", type=float, default=0.5)
    diag.add_argument("--min-length", type=int, default=100)

    pred = sub.add_parser("predict", help="posterior predictive metrics on held-out rows")
    pred.add_argument("--samples", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--seed", type=int, default=0)
    pred.add_argument("--level", type=float, default=0.95)
    pred.add_argument("--out", help="CSV file for per-row predictions")
    return parser


def _require_file(parser, path):
    if not os.path.isfile(path):
        parser.error(f"no such file: {path}")


def _cmd_simulate(args):
    scenario = ScenarioConfig(n=args.n, trials=args.trials, levels=args.levels,
                              sigma_eps2=args.sigma_eps2, sigma_us2=args.sigma_us2,
                              sigma_ua2=args.sigma_ua2)
    dataset, truth = generate_synthetic(scenario, np.random.default_rng(args.seed))
    write_dataset(dataset, args.out)
    if args.truth:
        with open(args.truth, "w") as handle:
            json.dump(truth.as_dict(), handle, separators=(",", ":"))
            handle.write("\n")
    print(f"wrote {dataset.n_rows} rows to {args.out}")
    return 0


def _chain_path(path, index, chains):
    if chains == 1:
        return path
    root, ext = os.path.splitext(path)
    return f"{root}.chain{index + 1}{ext or '.jsonl'}"


def _cmd_fit(args):
    run = read_config(args.config) if args.config else RunConfig()
    hp = run.hyperparameters
    changes = {}
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.burnin is not None:
        changes["burn_in"] = args.burnin
    if args.thin is not None:
        changes["thin"] = args.thin
    if args.no_random_effects:
        changes["random_effects"] = False
    hp = hp.replace(**changes)
    seed = run.seed if args.seed is None else args.seed
    chains = run.chains if args.chains is None else args.chains
    if chains < 1:
        raise LFMMError("--chains must be positive")
    dataset = load_dataset(args.data)
    dataset.validate(require_coverage=True)
    seeds = np.random.SeedSequence(seed).spawn(chains) if chains > 1 else [np.random.SeedSequence(seed)]
    for c, seq in enumerate(seeds):
        config = SamplerConfig(hyperparameters=hp, hamming_radius=run.hamming_radius, seed=seed,
                               alphabet=args.alphabet or run.alphabet, init=run.init,
                               second_layer=run.second_layer,
                               warmup=run.warmup if args.warmup is None else args.warmup,
                               progress_every=max(1, hp.iterations // 20))
        sampler = GibbsSampler(dataset, config, np.random.default_rng(seq))
        meta = sampler.metadata()
        meta["chain"] = c + 1
        path = _chain_path(args.out, c, chains)
        stored = 0
        with SampleWriter(path, meta) as writer:
            for it in range(1, hp.iterations + 1):
                sampler.step()
                if it > hp.burn_in and (it - hp.burn_in) % hp.thin == 0:
                    writer.write(sampler.record())
                    stored += 1
                if it % config.progress_every == 0:
                    rates = sampler.acceptance_rates()
                    logging.getLogger("lfmm").info(
                        "chain %d iteration %d/%d; acceptance: %s", c + 1, it, hp.iterations,
                        ", ".join(f"{k}={v:.2f}" for k, v in rates.items() if v == v))
        print(f"chain {c + 1}: stored {stored} draws in {path}")
    return 0


def _summary_rows(store, level, interactions):
    rows = []
    for j in range(store.p):
        probs = cluster_count_probabilities(store, j)
        for k in range(store.num_times):
            for c in range(store.levels[j]):
                rows.append([f"cluster_count[x{j + 1}]", k + 1, c + 1, float(probs[k, c]), "", ""])
    curves = store.observed_curves()
    tail = 0.5 * (1.0 - level)
    lower, upper = np.quantile(curves, [tail, 1.0 - tail], axis=0)
    mean = curves.mean(axis=0)
    for c, combo in enumerate(store.combinations):
        name = "-".join(str(int(v) + 1) for v in combo)
        for k in range(store.num_times):
            rows.append(["fixed_effect", k + 1, name, float(mean[k, c]), float(lower[k, c]), float(upper[k, c])])
    effects = anova_from_store(store, level, interactions)
    for key, (m, lo, hi) in effects.items():
        if key == "overall":
            for k in range(store.num_times):
                rows.append(["overall", k + 1, "", float(m[k]), float(lo[k]), float(hi[k])])
        elif key[0] == "main":
            j = key[1]
            for a in range(store.levels[j]):
                for k in range(store.num_times):
                    rows.append([f"main[x{j + 1}]", k + 1, a + 1, float(m[a, k]), float(lo[a, k]), float(hi[a, k])])
        else:
            _, j1, j2 = key
            for a in range(store.levels[j1]):
                for b in range(store.levels[j2]):
                    for k in range(store.num_times):
                        rows.append([f"interaction[x{j1 + 1},x{j2 + 1}]", k + 1, f"{a + 1}:{b + 1}",
                                     float(m[a, b, k]), float(lo[a, b, k]), float(hi[a, b, k])])
    return rows


def _cmd_summarize(args):
    store = read_samples(args.samples)
    if args.predictor is not None:
        if not 1 <= args.predictor <= store.p:
            raise LFMMError(f"--predictor must lie in 1..{store.p}")
        probs = cluster_count_probabilities(store, args.predictor - 1)
        print("k," + ",".join(f"ell={c + 1}" for c in range(probs.shape[1])))
        for k, row in enumerate(probs):
            print(f"{k + 1}," + ",".join(repr(float(v)) for v in row))
    if args.out:
        write_summary(_summary_rows(store, args.level, not args.no_interactions), args.out)
        print(f"wrote summary to {args.out}", file=sys.stderr)
    if args.predictor is None and not args.out:
        raise LFMMError("nothing to do: give --predictor and/or --out")
    return 0


def _cmd_diagnose(args):
    store = read_samples(args.samples)
    rows = []
    for name, trace in store.monitored().items():
        z, p_value = geweke_diagnostic(trace, args.first, args.last, args.min_length)
        rows.append([name, z, p_value, format_geweke(z, p_value)])
    for name, z, p_value, text in rows:
        print(f"{name}\t{text}")
    if args.out:
        write_summary(rows, args.out, columns=("parameter", "z", "p_value", "formatted"))
    return 0


def _cmd_predict(args):
    store = read_samples(args.samples)
    dataset = load_dataset(args.data, levels=store.levels, num_times=store.num_times)
    result = posterior_predictive(store, dataset, np.random.default_rng(args.seed), args.level)
    print(f"rmse\t{result.rmse:.6f}")
    print(f"coverage\t{result.coverage:.6f}")
    print(f"interval_width\t{result.width:.6f}")
    if args.out:
        rows = [[str(dataset.subject[i]), int(dataset.trial[i]), int(dataset.time[i]), float(dataset.y[i]),
                 float(result.mean[i]), float(result.lower[i]), float(result.upper[i])]
                for i in range(dataset.n_rows)]
        write_summary(rows, args.out, columns=("subject", "trial", "time", "y", "mean", "lower", "upper"))
    return 0


COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "summarize": _cmd_summarize,
    "diagnose": _cmd_diagnose,
    "predict": _cmd_predict,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(message)s")
    for name in ("data", "samples", "config"):
        path = getattr(args, name, None)
        if path is not None:
            _require_file(parser, path)
    try:
        return COMMANDS[args.command](args)
    except (LFMMError, OSError) as err:
        print(f"lfmm {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
