"""Command-line front end: ``pnc train|eval|marginal|classify|validate|gradcheck``.

All results go to stdout as ``key=value`` lines; diagnostics go to stderr.
Exit codes: 0 success, 2 config, 3 data/format, 4 query, 5 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# variable-set specs


def parse_var_spec(spec: str, structure) -> set[int]:
    """Resolve ``all``, ``none``, ``ranks:9-16`` or ``vars:3,7`` to variable ids.

    Ranks index the induced order and vars index pixels in raster order;
    both are 1-based and accept comma-separated items and ``a-b`` ranges.
    """
    from .errors import QueryError

    n = structure.num_variables
    spec = spec.strip()
    if spec == "all":
        return set(range(n))
    if spec in ("none", ""):
        return set()
    kind, _, body = spec.partition(":")
    if kind not in ("ranks", "vars") or not body:
        raise QueryError(f"bad variable spec {spec!r}; use all, none, ranks:A-B or vars:I,J")
    picked: set[int] = set()
    for item in body.split(","):
        lo, _, hi = item.strip().partition("-")
        try:
            a, b = int(lo), int(hi or lo)
        except ValueError:
            raise QueryError(f"bad range {item!r} in {spec!r}") from None
        if not 1 <= a <= b <= n:
            raise QueryError(f"range {item!r} outside 1..{n}")
        picked.update(range(a - 1, b))
    if kind == "ranks":
        order = structure.variable_order.variables
        return {int(order[r]) for r in picked}
    return picked


def read_records(path, num_vars: int):
    """Evidence records from an IDX image file or a whitespace-separated text file."""
    from pathlib import Path

    import numpy as np

    from .data import IMAGE_MAGIC, load_idx
    from .errors import DataError

    path = Path(path)
    try:
        head = path.read_bytes()[:4]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if path.suffix == ".gz" or head == IMAGE_MAGIC.to_bytes(4, "big"):
        x = load_idx(path).flat()
    else:
        rows = [ln.split("#", 1)[0].split() for ln in path.read_text().splitlines()]
        rows = [r for r in rows if r]
        try:
            x = np.array([[int(v) for v in r] for r in rows], dtype=np.int64)
        except ValueError as e:
            raise DataError(f"{path}: non-integer evidence value ({e})") from e
        x = x.reshape(len(rows), -1) if rows else np.zeros((0, num_vars), dtype=np.int64)
    if x.shape[1] != num_vars:
        raise DataError(f"{path}: records have {x.shape[1]} values, model has {num_vars}")
    return x


# --------------------------------------------------------------------------
# commands


def _load_data(images, labels):
    from .data import load_idx
    from .errors import DataError

    if not images:
        raise DataError("no images given (use --images or the config's images key)")
    return load_idx(images, labels or None)


def cmd_train(args) -> int:
    from pathlib import Path

    from .persistence import Config, parse_config, save_checkpoint
    from .training import train

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = parse_config(Path(args.config), overrides) if args.config else Config(**overrides)
    images = args.images or cfg.images
    labels = args.labels or cfg.labels
    data = _load_data(images, labels)
    model = cfg.build_model()
    result = train(model, data, cfg.train_config(),
                   on_record=lambda rec: print(rec.line(), flush=True))
    save_checkpoint(result.model, args.out, cfg, result.optimizer)
    best = "na" if result.best_epoch is None else result.best_epoch
    print(f"checkpoint={args.out} best_epoch={best}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .inference import bits_per_dimension
    from .persistence import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    data = _load_data(args.images, args.labels)
    x = data.flat()
    if data.num_dims != model.structure.num_variables:
        from .errors import DataError
        raise DataError(f"images have {data.num_dims} pixels, model has "
                        f"{model.structure.num_variables} variables")
    cls = data.labels if (data.labels is not None and model.num_classes > 1) else args.cls
    logp = model.forward(x, cls=cls) if len(x) else np.zeros(0)
    for i, v in enumerate(logp):
        print(f"sample={i} logp={_fmt(v)}")
    if len(logp):
        print(f"bpd={_fmt(bits_per_dimension(float(-logp.mean()), data.num_dims))}")
    else:
        print("bpd=na")
    return 0


def cmd_marginal(args) -> int:
    from .errors import QueryError
    from .inference import log_marginal
    from .persistence import load_checkpoint
    from .structure import validate_query

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    marg = parse_var_spec(args.marginalize, model.structure)
    check = validate_query(model.structure, marg)
    if not check:
        raise QueryError(check.message)
    x = read_records(args.evidence_file, model.structure.num_variables)
    out = log_marginal(model, x, marg, args.cls) if len(x) else []
    for i, v in enumerate(out):
        print(f"record={i} logp={_fmt(v)}")
    return 0


def cmd_classify(args) -> int:
    import numpy as np

    from .inference import class_posterior
    from .persistence import load_checkpoint

    model = load_checkpoint(args.checkpoint).model
    data = _load_data(args.images, args.labels)
    x = data.flat()
    post = class_posterior(model, x) if len(x) else np.zeros((0, model.num_classes))
    for i, row in enumerate(post):
        probs = ",".join(_fmt(p) for p in row)
        print(f"sample={i} pred={int(np.argmax(row))} posterior={probs}")
    if data.labels is not None and len(x):
        print(f"acc={_fmt(np.mean(np.argmax(post, axis=1) == data.labels))}")
    return 0


def _model_source(args):
    """(factory(seed) -> model, from_checkpoint) for validate/gradcheck."""
    from pathlib import Path

    from .errors import ConfigError
    from .persistence import load_checkpoint, parse_config

    if bool(args.checkpoint) == bool(args.config):
        raise ConfigError("give exactly one of --checkpoint or --config")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
        return (lambda seed: model), True
    cfg = parse_config(Path(args.config))
    return cfg.build_model, False


def cmd_validate(args) -> int:
    from .checks import random_model, run_checks
    from .errors import ValidationFailure

    factory, fixed = _model_source(args)
    base = args.seed or 0
    failed = 0
    for seed in range(base, base + args.seeds):
        model = factory(seed) if fixed else random_model(factory, seed)
        for res in run_checks(model, seed):
            print(res.line(), flush=True)
            failed += not res.passed
    if failed:
        raise ValidationFailure(f"{failed} check(s) failed")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .checks import random_model
    from .errors import ValidationFailure
    from .training import check_gradients

    factory, fixed = _model_source(args)
    seed = args.seed or 0
    model = factory(seed) if fixed else random_model(factory, seed)
    rng = np.random.default_rng(seed)
    x = rng.integers(0, model.num_categories, size=(args.samples, model.structure.num_variables))
    if model.leaf_mode == "two_input":
        x = rng.integers(0, 256, size=x.shape)
    labels = rng.integers(0, model.num_classes, size=args.samples) \
        if model.num_classes > 1 else None
    objective = "cross_entropy" if (args.objective == "cross_entropy") else "nll"
    report = check_gradients(model, x, labels, objective, tolerance=args.tolerance)
    for name, err in report.max_rel_error.items():
        print(f"group={name} max_rel_error={err:.3e}")
    print(f"status={'pass' if report.ok else 'fail'} worst={report.worst:.3e}")
    if not report.ok:
        raise ValidationFailure(f"gradient error {report.worst:.3e} >= {args.tolerance}")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnc", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (effective before numpy loads)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        return sp

    sp = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    sp.add_argument("--config")
    sp.add_argument("--images")
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, help="override the config's epoch count")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="per-sample log-density and bpd"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--class", dest="cls", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("marginal", help="log-marginals with an order suffix summed out"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--evidence-file", required=True)
    sp.add_argument("--marginalize", required=True,
                    help="all | none | ranks:A-B[,..] | vars:I[,J-K..] (1-based)")
    sp.add_argument("--class", dest="cls", type=int, default=0)
    sp.set_defaults(func=cmd_marginal)

    sp = common(sub.add_parser("classify", help="class posteriors under a uniform prior"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels")
    sp.set_defaults(func=cmd_classify)

    sp = common(sub.add_parser("validate", help="oracle checks on small models"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(func=cmd_validate)

    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--samples", type=int, default=3)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--objective", choices=("nll", "cross_entropy"), default="nll")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    from .errors import InvalidStructureError, PNCError

    try:
        return args.func(args)
    except InvalidStructureError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PNCError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
