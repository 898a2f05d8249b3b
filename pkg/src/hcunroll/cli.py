"""Command-line entry point.

    hcunroll make-data   --config run.ini --out data.bin
    hcunroll train       --config run.ini --data data.bin --out model.ckpt
    hcunroll reconstruct --checkpoint model.ckpt --data data.bin --item 0 --out-dir img/
    hcunroll evaluate    --checkpoint model.ckpt --data data.bin --out-dir eval/
    hcunroll compare     --data data.bin --methods a.ckpt b.ckpt --classical --out-dir cmp/

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import classical
from .container import FormatError
from .errors import ContractError, NumericalError, ShapeError
from .metrics import (
    MetricsRow,
    pairwise_wilcoxon,
    rows_to_csv,
    score_methods,
    summarize,
    summary_text,
)
from .training import (
    Checkpoint,
    DataConfig,
    ModelConfig,
    TrainConfig,
    load_dataset,
    make_dataset,
    reconstruct,
    save_dataset,
    train,
)

EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 1, 2, 3


class ConfigError(ValueError):
    pass


_SECTIONS = {"dataset": DataConfig, "model": ModelConfig, "train": TrainConfig}
_CLASSICAL_KEYS = {"pgd_iters": int, "admm_iters": int, "admm_beta": float, "cg_iters": int}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path: str | Path | None) -> dict:
    """Parse and validate an INI run config; every key is checked before use."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS and section != "classical":
            raise ConfigError(f"unknown config section [{section}]")
    out = {}
    for section, cls in _SECTIONS.items():
        known = {f.name: type(f.default) for f in fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                kwargs[key] = _convert(section, key, raw, known[key])
        try:
            out[section] = cls(**kwargs)
        except ValueError as exc:  # ContractError and bad enum values alike
            raise ConfigError(f"[{section}] {exc}") from None
    opts = {}
    if parser.has_section("classical"):
        for key, raw in parser.items("classical"):
            if key not in _CLASSICAL_KEYS:
                raise ConfigError(f"unknown config key [classical] {key}")
            opts[key] = _convert("classical", key, raw, _CLASSICAL_KEYS[key])
    out["classical"] = opts
    return out


# -- image output --------------------------------------------------------------


def to_gray8(img: np.ndarray, scale_max: float, gain: float = 1.0) -> np.ndarray:
    scaled = gain * np.abs(img) / scale_max * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


# -- commands ------------------------------------------------------------------


def cmd_make_data(args) -> int:
    cfg = load_config(args.config)
    data_cfg = cfg["dataset"]
    if args.seed is not None:
        data_cfg = replace(data_cfg, seed=args.seed)
    if args.mask is not None:
        data_cfg = replace(data_cfg, mask=args.mask)
    save_dataset(make_dataset(data_cfg), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    model_cfg = cfg["model"]
    if args.algorithm is not None:
        model_cfg = replace(model_cfg, algorithm=args.algorithm)
    ds = load_dataset(args.data)

    def report(epoch: int, loss: float) -> None:
        print(f"{epoch},{loss:.10g}", flush=True)

    ckpt = train(ds, model_cfg, cfg["train"], on_epoch=report)
    ckpt.save(args.out)
    return 0


def _item(ds, split: str, index: int):
    items = ds.test if split == "test" else ds.train
    if not 0 <= index < len(items):
        raise ContractError(f"item {index} out of range for {len(items)} {split} items")
    return items[index]


def cmd_reconstruct(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.data)
    it = _item(ds, args.split, args.item)
    rec = reconstruct(ckpt.network(), it)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    peak = float(np.abs(it.x_ref).max())
    write_pgm(out / "reference.pgm", to_gray8(it.x_ref, peak))
    write_pgm(out / "zero_filled.pgm", to_gray8(it.zero_filled(), peak))
    write_pgm(out / "reconstruction.pgm", to_gray8(rec, peak))
    err = np.abs(np.abs(it.x_ref) - np.abs(rec))
    write_pgm(out / "error_x10.pgm", to_gray8(err, peak, gain=10.0))
    return 0


def _check_shapes(ds, model_cfg: ModelConfig) -> None:
    if model_cfg.prox == "unet":
        h, w = ds.test[0].x_ref.shape
        if h % 4 or w % 4:
            raise ShapeError(f"U-Net checkpoint cannot process {h}x{w} images")


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.data)
    _check_shapes(ds, ckpt.model)
    name = Path(args.checkpoint).stem
    net = ckpt.network()
    rows = score_methods(ds.test, {
        "zero_filled": lambda it: it.zero_filled(),
        name: lambda it: reconstruct(net, it),
    })
    _write_tables(Path(args.out_dir), rows)
    return 0


def _write_tables(out: Path, rows: list[MetricsRow]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_to_csv(rows))
    summary = summarize(rows)
    (out / "summary.txt").write_text(summary_text(summary))
    return summary


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    copts = cfg["classical"]
    ds = load_dataset(args.data)
    methods = {"zero_filled": lambda it: it.zero_filled()}
    specs = list(args.methods)
    if args.classical:
        specs += [s for s in ("classical:pgd", "classical:admm") if s not in specs]
    if len(specs) < 2 and not args.classical:
        raise ContractError("compare needs at least two methods")
    tuned = []
    for spec in specs:
        if spec.startswith("classical:"):
            kind = spec.split(":", 1)[1]
            kwargs = _classical_kwargs(kind, copts)
            lam, _ = classical.tune_lambda(kind, ds.test, **kwargs)
            tuned.append(f"{spec}.lambda={lam:.6g}")
            methods[spec] = (lambda k, l, kw: lambda it: classical.reconstruct_classical(k, it, l, **kw))(
                kind, lam, kwargs)
            continue
        ckpt = Checkpoint.load(spec)
        _check_shapes(ds, ckpt.model)
        net = ckpt.network()
        name = Path(spec).stem
        if name in methods:
            name = spec
        methods[name] = (lambda n: lambda it: reconstruct(n, it))(net)
    rows = score_methods(ds.test, methods)
    out = Path(args.out_dir)
    summary = _write_tables(out, rows)
    lines = ["method_a,method_b,metric,statistic,p_value"]
    for metric in ("psnr", "ssim"):
        for ma, mb, stat, p in pairwise_wilcoxon(rows, metric):
            lines.append(f"{ma},{mb},{metric},{stat:.6f},{p:.6g}")
    (out / "wilcoxon.csv").write_text("\n".join(lines) + "\n")
    ranking = sorted(summary, key=lambda m: -summary[m].get("psnr_mean", math.inf))
    report = [f"rank.{i + 1}={m}" for i, m in enumerate(ranking)] + tuned
    with open(out / "summary.txt", "a") as fh:
        fh.write("\n".join(report) + "\n")
    print("\n".join(f"{m}: mean PSNR {summary[m].get('psnr_mean', math.inf):.3f} dB" for m in ranking))
    return 0


def _classical_kwargs(kind: str, opts: dict) -> dict:
    if kind == "pgd":
        return {"iters": opts.get("pgd_iters", 100)}
    if kind == "admm":
        return {"iters": opts.get("admm_iters", 50), "beta": opts.get("admm_beta", 0.05),
                "cg_iters": opts.get("cg_iters", 10)}
    raise ContractError(f"unknown classical method {kind!r}")


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hcunroll", description="History-cognizant unrolled MRI reconstruction")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-data", help="generate a synthetic dataset file")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--mask", choices=["uniform", "random"])
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train an unrolled network")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--algorithm")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="write PGM images for one item")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--item", type=int, default=0)
    s.add_argument("--split", choices=["train", "test"], default="test")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="score several methods and test differences")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", nargs="*", default=[])
    s.add_argument("--classical", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
