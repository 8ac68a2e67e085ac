"""
Command-line front end.

Exit codes: 0 success, 2 usage or unreadable input, 3 invalid model,
4 numerical failure. ``SPECCOH_THREADS`` caps BLAS/FFT worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .estimate import (
    SmoothingKernel,
    ZeroVarianceError,
    average_periodogram,
    lag_pairing,
    nw_detrend,
    periodogram,
    replicate_coherence,
    smooth,
    standardize_anomalies,
)
from .fit import FitConfig, FitError, fit_matern_cross, fit_matern_marginal, format_table
from .grid import FieldFileError, GridSpec, FrequencyGrid, read_field, read_field_csv, write_field
from .models import (
    InvalidModelError,
    MaternParams,
    ModelFileError,
    PairSpectrum,
    UndefinedSpectrumError,
    load_model,
    validity_check,
)
from .simulate import SimRequest, SimulationError, filtered_correlation, simulate

EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("speccoh")


class UsageError(Exception):
    pass


def _ints(text):
    return tuple(int(t) for t in text.split(","))


def _floats(text):
    return tuple(float(t) for t in text.split(","))


def _band(text):
    lo, _, hi = text.partition(":")
    return float(lo) if lo else 0.0, float(hi) if hi else None


def _kernel(spec: str, d: int) -> SmoothingKernel:
    if spec.startswith("box"):
        width = int(spec[3:] or 3)
        return SmoothingKernel.box(d, width)
    if spec == "none":
        return SmoothingKernel.delta(d)
    if spec.startswith("custom:"):
        path = spec.split(":", 1)[1]
        w = np.load(path) if path.endswith(".npy") else np.loadtxt(path, ndmin=d)
        w = np.asarray(w, dtype=float)
        return SmoothingKernel(w / w.sum())
    raise UsageError(f"unknown kernel spec {spec!r}")


def _grid(args) -> GridSpec:
    sizes = _ints(args.grid)
    spacing = _floats(args.spacing) if args.spacing else None
    if spacing is not None and len(spacing) == 1:
        spacing = spacing * len(sizes)
    return GridSpec(sizes, spacing)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])


def _load_valid_model(path):
    model = load_model(path)
    res = validity_check(model)
    if not res.valid:
        raise InvalidModelError(res.reason, res.witness)
    return model


def _preprocess(fld, args):
    if getattr(args, "detrend", None):
        kind, _, bw = args.detrend.partition(":")
        if kind != "nw" or not bw:
            raise UsageError(f"--detrend expects nw:<bandwidth>, got {args.detrend!r}")
        fld = nw_detrend(fld, float(bw))
    if getattr(args, "standardize", False):
        fld = standardize_anomalies(fld)
    return fld


# ---------------------------------------------------------------------------
# subcommands


def cmd_model_curve(args):
    model = _load_valid_model(args.model)
    i, j = _ints(args.pair)
    lo, hi, n = args.radii.split(":")
    r = np.logspace(np.log10(float(lo)), np.log10(float(hi)), int(n))
    om = r[:, None] * np.eye(1, model.dim)
    ps = PairSpectrum.from_matrix(model.spectral_matrix(om), i, j)
    coh2 = ps.coherence2
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(ps.f11 > 0, ps.f12 / np.where(ps.f11 > 0, ps.f11, 1), 0)
    phase = np.angle(A)
    _write_rows(args.out, ["r", "coh2", "abs_coh", "phase", "gain"],
                zip(r, coh2, np.sqrt(coh2), phase, np.abs(A)))


def cmd_validate_model(args):
    model = load_model(args.model)
    res = validity_check(model, args.budget)
    if res.valid:
        print("valid")
        return 0
    print(f"invalid: {res.reason}")
    print("witness frequency: " + ",".join(repr(float(w)) for w in res.witness))
    return EXIT_INVALID


def cmd_simulate(args):
    model = _load_valid_model(args.model)
    fld = simulate(SimRequest(model, _grid(args), args.reps, args.seed, args.method))
    write_field(fld, args.out)


def _read_any_field(path):
    return read_field_csv(path) if path.endswith(".csv") else read_field(path)


def cmd_periodogram(args):
    fld = _preprocess(_read_any_field(args.input), args)
    rep = "averaged" if args.rep == "averaged" else int(args.rep)
    if args.kernel == "none":
        pg = periodogram(fld, rep)
    elif rep == "averaged":
        pg = average_periodogram(fld, _kernel(args.kernel, fld.grid.dims))
    else:
        pg = smooth(periodogram(fld, rep), _kernel(args.kernel, fld.grid.dims))
    p, d = fld.nvars, fld.grid.dims
    header = [f"w{i + 1}" for i in range(d)]
    cols = []
    for k in range(p):
        for l in range(k, p):
            header += [f"re{k}{l}", f"im{k}{l}"]
            cols += [pg.mats[..., k, l].real.ravel(), pg.mats[..., k, l].imag.ravel()]
    _write_rows(args.out, header, np.column_stack([pg.freqs.freqs] + cols))


def cmd_coherence(args):
    fld = _preprocess(_read_any_field(args.input), args)
    k, l = _ints(args.pair)
    pairing = lag_pairing(fld.reps, args.lag) if args.lag else None
    summ = replicate_coherence(fld, k, l, _kernel(args.kernel, fld.grid.dims), pairing, args.average)
    summ.to_csv(args.out)


def _grid_from_freq_columns(W):
    """Recover the lattice (and row permutation) from frequency columns of a CSV."""
    axes = [np.unique(W[:, i]) for i in range(W.shape[1])]
    sizes = tuple(len(a) for a in axes)
    spacings = []
    for a, n in zip(axes, sizes):
        step = np.min(np.diff(a)) if n > 1 else 2 * np.pi
        spacings.append(2 * np.pi / (n * step))
    freqs = FrequencyGrid(GridSpec(sizes, tuple(spacings)))
    idx = [np.searchsorted(a, W[:, i]) for i, a in enumerate(axes)]
    order = np.ravel_multi_index(idx, sizes)
    if len(order) != np.prod(sizes) or len(np.unique(order)) != len(order):
        raise UsageError("CSV frequencies do not form a full Fourier lattice")
    return freqs, order


def _read_table(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _coherence_from_csv(path):
    from .estimate import CoherenceSummary

    header, data = _read_table(path)
    d = sum(h.startswith("w") for h in header)
    freqs, order = _grid_from_freq_columns(data[:, :d])
    col = {h: data[:, i] for i, h in enumerate(header)}

    def lattice(name):
        out = np.empty(len(order))
        out[order] = col[name]
        return out.reshape(freqs.shape)

    phase, gain = lattice("phase"), lattice("gain")
    return CoherenceSummary(freqs, lattice("coh2"), phase, gain, (0, 1), 1, gain * np.exp(1j * phase))


def _marginal_from_csv(path):
    header, data = _read_table(path)
    d = sum(h.startswith("w") for h in header)
    freqs, order = _grid_from_freq_columns(data[:, :d])
    vals = np.empty(len(order))
    vals[order] = data[:, d]
    return freqs, vals.reshape(freqs.shape)


def _marginals_from_json(text):
    """Inline JSON or a path to a JSON file."""
    if text.lstrip().startswith(("[", "{")):
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--marginals is not valid JSON: {exc}") from None
    else:
        with open(text) as fh:
            spec = json.load(fh)
    if isinstance(spec, dict) and "estimates" in spec:
        spec = [spec["estimates"]] * 2
    return [MaternParams(**{k: m[k] for k in ("sigma2", "nu", "a")}) for m in spec]


def cmd_fit(args):
    cfg = FitConfig(*_band(args.band)) if args.band else FitConfig()
    if args.stage == "marginal":
        if args.input.endswith(".csv"):
            res = fit_matern_marginal(_marginal_from_csv(args.input), cfg)
        else:
            fld = _preprocess(read_field(args.input), args)
            avg = average_periodogram(fld, _kernel(args.kernel, fld.grid.dims))
            res = fit_matern_marginal(avg, cfg, var=args.var)
        res.to_json(args.out)
        print(res.to_json())
        return 0
    if args.input.endswith(".csv"):
        if not args.marginals:
            raise UsageError("cross fits from CSV need --marginals")
        res = fit_matern_cross(_coherence_from_csv(args.input), _marginals_from_json(args.marginals), cfg)
        res.to_json(args.out)
        print(res.to_json())
        return 0
    fld = _preprocess(read_field(args.input), args)
    kern = _kernel(args.kernel, fld.grid.dims)
    pairs = [_ints(p) for p in (args.pairs or "0,1").split()]
    lags = [int(x) for x in args.lags.split(",")] if args.lags else [args.lag or 0]
    if args.marginals:
        margs = _marginals_from_json(args.marginals)
    else:
        avg = average_periodogram(fld, kern)
        margs = [MaternParams(**fit_matern_marginal(avg, cfg, var=v).estimates) for v in range(fld.nvars)]
    results = {}
    for k, l in pairs:
        for lag in lags:
            pairing = lag_pairing(fld.reps, lag) if lag else None
            coh = replicate_coherence(fld, k, l, kern, pairing)
            label = f"{k}-{l}" + (f"@{lag}" if len(lags) > 1 or lag else "")
            results[label] = fit_matern_cross(coh, (margs[k], margs[l]), cfg)
    if len(results) == 1:
        res = next(iter(results.values()))
        res.to_json(args.out)
        print(res.to_json())
    else:
        from dataclasses import asdict

        with open(args.out, "w") as fh:
            json.dump({k: asdict(v) for k, v in results.items()}, fh, indent=2, sort_keys=True)
        print(format_table(results))
    return 0


def cmd_filter_experiment(args):
    model = _load_valid_model(args.model)
    res = filtered_correlation(model, _grid(args), args.reps, args.seed, args.method)
    _write_rows(args.out, ["filter", "corr", "nreps"],
                [("lowpass", res.low, str(res.nreps)), ("highpass", res.high, str(res.nreps))])


# ---------------------------------------------------------------------------


EXIT_CODES_TEXT = "exit codes: 0 success, 2 usage error, 3 invalid model, 4 numerical failure"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="speccoh",
        description="Spectral coherence, phase and gain for multivariate gridded fields.",
        epilog=EXIT_CODES_TEXT,
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def grid_opts(p):
        p.add_argument("--grid", required=True, help="sizes n1,n2,...")
        p.add_argument("--spacing", help="spacings d1,d2,... (default 1)")
        p.add_argument("--reps", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--method", choices=["auto", "dense", "circulant"], default="auto")

    def prep_opts(p):
        p.add_argument("--standardize", action="store_true", help="per-cell replicate standardisation")
        p.add_argument("--detrend", help="nw:<bandwidth> Nadaraya-Watson detrending over replicates")
        p.add_argument("--kernel", default="box3", help="box3 | boxN | none | custom:<file>")

    p = sub.add_parser("model-curve", help="coherence/phase/gain of a model along |w|", epilog=EXIT_CODES_TEXT)
    p.add_argument("--model", required=True)
    p.add_argument("--pair", default="0,1")
    p.add_argument("--radii", default="0.01:100:200", help="rmin:rmax:count, log spaced")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_model_curve)

    p = sub.add_parser("validate-model", help="spectral validity check", epilog=EXIT_CODES_TEXT)
    p.add_argument("--model", required=True)
    p.add_argument("--budget", type=int, default=512)
    p.set_defaults(func=cmd_validate_model)

    p = sub.add_parser("simulate", help="simulate a Gaussian field to MFLD1", epilog=EXIT_CODES_TEXT)
    p.add_argument("--model", required=True)
    grid_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("periodogram", help="matrix periodogram to CSV", epilog=EXIT_CODES_TEXT)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--rep", default="0", help="replicate index or 'averaged'")
    prep_opts(p)
    p.set_defaults(kernel="none")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_periodogram)

    p = sub.add_parser("coherence", help="replicate-averaged coherence to CSV", epilog=EXIT_CODES_TEXT)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--pair", default="0,1")
    p.add_argument("--lag", type=int, default=0, help="pair replicate d with d - lag")
    p.add_argument("--average", choices=["coherence", "spectra"], default="coherence")
    prep_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coherence)

    p = sub.add_parser("fit", help="least-squares Matérn fits", epilog=EXIT_CODES_TEXT)
    p.add_argument("--in", dest="input", required=True, help="MFLD1 field or CSV (periodogram/coherence)")
    p.add_argument("--stage", choices=["marginal", "cross"], required=True)
    p.add_argument("--band", help="rmin:rmax radial band")
    p.add_argument("--var", type=int, default=0, help="variable for marginal fits")
    p.add_argument("--pairs", help="space separated pairs, e.g. '0,1 0,2'")
    p.add_argument("--lag", type=int, default=0)
    p.add_argument("--lags", help="comma separated lags for a batch table")
    p.add_argument("--marginals", help="JSON list of marginal Matérn params (inline or file) or a marginal fit result file")
    prep_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("filter-experiment", help="low/high-pass filtered correlations", epilog=EXIT_CODES_TEXT)
    p.add_argument("--model", required=True)
    grid_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter_experiment)
    return ap


def _thread_limit():
    n = os.environ.get("SPECCOH_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    limiter = _thread_limit()
    try:
        code = args.func(args)
        return code or 0
    except UsageError as exc:
        print(f"speccoh: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FieldFileError, ModelFileError, FileNotFoundError) as exc:
        print(f"speccoh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidModelError as exc:
        print(f"speccoh: invalid model: {exc}", file=sys.stderr)
        if exc.witness is not None:
            print("witness frequency: " + ",".join(repr(float(w)) for w in exc.witness), file=sys.stderr)
        return EXIT_INVALID
    except (SimulationError, FitError, UndefinedSpectrumError, ZeroVarianceError, np.linalg.LinAlgError) as exc:
        print(f"speccoh: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
