"""Command-line entry points.

Subcommands: pretrain (float baseline), quantize (cluster-aware training),
eval (checkpoint accuracy), gradcheck (derivative self-verification), bench
(timing/memory grid), fetch-mnist (digest-verified download). Every run
writes line-delimited JSON reports whose first record echoes the full
configuration. Exit codes: 0 success, 1 check failure, 2 missing data,
3 config error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import urllib.error
import urllib.request
from pathlib import Path

from . import bench as bench_mod
from .config import RunConfig, build_train_config, parse_config
from .data import (
    MNIST_FILES,
    MNIST_SHA256,
    append_jsonl,
    as_images,
    load_checkpoint,
    load_mnist,
    mnist_available,
    mnist_paths,
    save_checkpoint,
    synthetic_blobs,
)
from .errors import (
    AdjointDivergence,
    ConfigError,
    FormatError,
    NumericsError,
    ParamError,
    ShapeError,
)
from .gradcheck import run_suite
from .nn import Network
from .training import bits_per_weight, evaluate, train, train_float

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_DATA = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


def _config_with_overrides(args) -> RunConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def _datasets(cfg: RunConfig):
    """Resolve the (train, eval) pair named by the config."""
    if cfg.dataset == "mnist":
        if not mnist_available(cfg.data_dir):
            root = mnist_paths(cfg.data_dir)["train_images"].parent
            raise FileNotFoundError(
                f"MNIST files not found under {root}; "
                f"run `idkm fetch-mnist --data-dir {root}` first"
            )
        return load_mnist(cfg.data_dir, "train"), load_mnist(cfg.data_dir, "test")
    data = cfg.data
    classes = data.get("classes", 4)
    points = data.get("points_per_class", 200)
    dim = data.get("dim", 8)
    separation = data.get("separation", 6.0)
    train_set = synthetic_blobs(cfg.seed, classes, points, dim, separation)
    eval_set = synthetic_blobs(
        cfg.seed + 1, classes, max(points // 4, 1), dim, separation
    )
    if "image_height" in data:
        shape = (
            data.get("image_channels", 1),
            data["image_height"],
            data.get("image_width", data["image_height"]),
        )
        train_set = as_images(train_set, *shape)
        eval_set = as_images(eval_set, *shape)
    return train_set, eval_set


def _check_arch(net: Network, ckpt) -> None:
    expected = net.param_shapes()
    stored = {t["name"]: tuple(t["shape"]) for t in ckpt.manifest["tensors"]}
    if expected != stored:
        raise ConfigError(
            f"checkpoint architecture does not match config: "
            f"config tensors {sorted(expected)}, checkpoint {sorted(stored)}"
        )


def _fresh_report(out: Path, name: str, echo: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.unlink(missing_ok=True)
    append_jsonl(path, {"type": "config", **echo})
    return path


def cmd_pretrain(args) -> int:
    cfg = _config_with_overrides(args)
    net = cfg.network()
    train_set, eval_set = _datasets(cfg)
    out = Path(cfg.out)
    report = _fresh_report(out, "pretrain.jsonl",
                           {"command": "pretrain", **cfg.echo()})
    params = cfg.pretrain
    epochs = args.epochs if args.epochs is not None else params.get("epochs", 20)

    def on_epoch(rec):
        append_jsonl(report, {"type": "epoch", **rec})
        print(f"epoch {rec['epoch']:>3}  loss {rec['loss']:.4f}  "
              f"top1 {rec['top1']:.4f}")

    history, weights = train_float(
        net,
        net.init_weights(cfg.seed),
        train_set,
        eval_set,
        learning_rate=params.get("lr", 0.1),
        epochs=epochs,
        batch_size=params.get("batch_size", 128),
        loss_kind=cfg.loss,
        seed=params.get("seed", cfg.seed),
        on_epoch=on_epoch,
    )
    ckpt_path = out / "pretrained.ckpt"
    save_checkpoint(ckpt_path, net, weights, config=cfg.echo())
    final = history[-1]["top1"] if history else evaluate(net, weights, eval_set)
    print(f"saved {ckpt_path}  final top1 {final:.4f}")
    floor = params.get("accuracy_floor", 0.0)
    if final < floor:
        print(f"error: accuracy {final:.4f} is below the configured floor "
              f"{floor}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


_QUANTIZE_OVERRIDES = (
    ("k", "k"),
    ("d", "d"),
    ("tau", "tau"),
    ("lr", "lr"),
    ("epochs", "epochs"),
    ("max_cluster_iters", "max_cluster_iters"),
    ("eps", "eps"),
    ("backend", "backend"),
    ("alpha0", "alpha0"),
    ("seed", "seed"),
    ("fallback_jfb", "fallback_jfb"),
    ("record_trace", "record_trace"),
)


def cmd_quantize(args) -> int:
    cfg = _config_with_overrides(args)
    net = cfg.network()
    overrides = {key: getattr(args, attr) for key, attr in _QUANTIZE_OVERRIDES}
    tcfg = build_train_config(cfg, overrides)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else (
        Path(cfg.out) / "pretrained.ckpt"
    )
    if not ckpt_path.exists():
        raise FileNotFoundError(
            f"checkpoint {ckpt_path} not found; run `idkm pretrain` first"
        )
    ckpt = load_checkpoint(ckpt_path)
    _check_arch(net, ckpt)
    train_set, eval_set = _datasets(cfg)
    echo = {
        "command": "quantize",
        **cfg.echo(),
        "train": dataclasses.asdict(tcfg),
        "checkpoint": str(ckpt_path),
    }
    report = _fresh_report(Path(cfg.out),
                           f"quantize-{tcfg.backend.kind}.jsonl", echo)

    def on_epoch(rec):
        append_jsonl(report, {"type": "epoch", **rec})
        loss = "  --  " if rec["loss"] is None else f"{rec['loss']:.4f}"
        print(f"epoch {rec['epoch']:>3}  loss {loss}  "
              f"hard {rec['top1_hard']:.4f}  soft {rec['top1_soft']:.4f}  "
              f"retained {rec['retained_iterates']}")

    history, state = train(net, ckpt.weights, tcfg, train_set, eval_set,
                           on_epoch=on_epoch)
    out_path = Path(cfg.out) / f"quantized-{tcfg.backend.kind}.ckpt"
    save_checkpoint(out_path, net, state.weights, config=echo,
                    codebooks=state.codebooks)
    last = history[-1]
    print(f"saved {out_path}")
    print(f"final top1 hard {last['top1_hard']:.4f}  "
          f"soft {last['top1_soft']:.4f}  "
          f"bits/weight {bits_per_weight(tcfg.k, tcfg.d):g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_with_overrides(args)
    net = cfg.network()
    ckpt_path = Path(args.checkpoint) if args.checkpoint else (
        Path(cfg.out) / "pretrained.ckpt"
    )
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    _check_arch(net, ckpt)
    _, eval_set = _datasets(cfg)
    mode = args.mode or ("hard" if ckpt.codebooks else "float")
    tau = args.tau if args.tau is not None else cfg.quantize.get("tau", 5e-4)
    acc = evaluate(net, ckpt.weights, eval_set,
                   codebooks=ckpt.codebooks or None, mode=mode, tau=tau)
    print(f"top1 {acc:.4f}  mode {mode}")
    for layer, bits in sorted(ckpt.bits_per_weight().items()):
        print(f"{layer}: {bits:g} bits/weight")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_suite(
        instances=args.instances,
        base_seed=args.seed if args.seed is not None else 0,
        inject_identity_m=args.inject_identity_m,
        with_fd=not args.skip_fd,
    )
    for line in report.lines():
        print(line)
    print("gradcheck PASSED" if report.passed else "gradcheck FAILED")
    return EXIT_OK if report.passed else EXIT_CHECK


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def cmd_bench(args) -> int:
    results = bench_mod.run_grid(
        t_values=_int_list(args.t),
        k_values=_int_list(args.k),
        d_values=_int_list(args.d),
        backends=tuple(args.backends.split(",")),
        repeats=args.repeats,
        seed=args.seed if args.seed is not None else 0,
        batch_size=args.batch_size,
    )
    print(bench_mod.HEADER)
    for res in results:
        print(res.row())
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "bench.jsonl"
        path.unlink(missing_ok=True)
        for res in results:
            append_jsonl(path, dataclasses.asdict(res))
        print(f"wrote {path}")
    if args.assert_ordering:
        problems = bench_mod.ordering_violations(results)
        if problems:
            for line in problems:
                print(f"ordering violation: {line}", file=sys.stderr)
            return EXIT_CHECK
        print("backward-time ordering holds: jfb < implicit < unrolled")
    return EXIT_OK


def _fetch_one(name: str, dest: Path) -> bool:
    want = MNIST_SHA256[name]
    if dest.exists():
        have = hashlib.sha256(dest.read_bytes()).hexdigest()
        if have == want:
            print(f"{name}: already present, digest ok")
            return True
        print(f"{name}: digest mismatch on existing file, refetching")
    for mirror in MNIST_MIRRORS:
        url = mirror + name
        try:
            with urllib.request.urlopen(url, timeout=120) as resp:
                blob = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            print(f"{url}: {exc}", file=sys.stderr)
            continue
        digest = hashlib.sha256(blob).hexdigest()
        if digest != want:
            print(f"{url}: digest {digest[:12]}… does not match published "
                  f"value, trying next mirror", file=sys.stderr)
            continue
        dest.write_bytes(blob)
        print(f"{name}: fetched {len(blob)} bytes, digest ok")
        return True
    return False


def cmd_fetch_mnist(args) -> int:
    root = Path(args.data_dir or os.environ.get("IDKM_DATA_DIR", "data"))
    root.mkdir(parents=True, exist_ok=True)
    for name in MNIST_FILES.values():
        if not _fetch_one(name, root / name):
            print(f"error: could not fetch {name} from any mirror",
                  file=sys.stderr)
            return EXIT_DATA
    print(f"MNIST ready under {root}")
    return EXIT_OK


def _add_run_flags(sp, include_quantize: bool):
    sp.add_argument("--config", required=True, help="INI run configuration")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None, help="output directory override")
    if include_quantize:
        sp.add_argument("--backend", choices=("unrolled", "implicit", "jfb"),
                        default=None)
        sp.add_argument("--k", type=int, default=None)
        sp.add_argument("--d", type=int, default=None)
        sp.add_argument("--tau", type=float, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--max-cluster-iters", dest="max_cluster_iters",
                        type=int, default=None)
        sp.add_argument("--eps", type=float, default=None)
        sp.add_argument("--alpha0", type=float, default=None)
        sp.add_argument("--fallback-jfb", dest="fallback_jfb",
                        action="store_const", const=True, default=None)
        sp.add_argument("--record-trace", dest="record_trace",
                        action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idkm",
        description="Codebook quantization training with implicit gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train the float baseline")
    _add_run_flags(sp, include_quantize=False)
    sp.add_argument("--epochs", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("quantize", help="quantization-aware training")
    _add_run_flags(sp, include_quantize=True)
    sp.add_argument("--checkpoint", default=None,
                    help="pretrained checkpoint (default: <out>/pretrained.ckpt)")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_flags(sp, include_quantize=False)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--mode", choices=("hard", "soft", "float"), default=None)
    sp.add_argument("--tau", type=float, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="verify the gradient backends")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--inject-identity-m", action="store_true",
                    help="deliberately skip the adjoint inverse (self-test)")
    sp.add_argument("--skip-fd", action="store_true",
                    help="skip the slower finite-difference comparisons")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="time the backends over a grid")
    sp.add_argument("--t", default="30", help="comma list of iteration counts")
    sp.add_argument("--k", default="4", help="comma list of codebook sizes")
    sp.add_argument("--d", default="1", help="comma list of sub-vector dims")
    sp.add_argument("--backends", default="jfb,implicit,unrolled")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--assert-ordering", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("fetch-mnist", help="download MNIST with digest checks")
    sp.add_argument("--data-dir", default=None)
    sp.set_defaults(func=cmd_fetch_mnist)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParamError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AdjointDivergence, NumericsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
