"""Command-line entry point: ``invisp <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import isp, synth
from .flow import load_checkpoint, model_forward, model_inverse
from .imageio import read_image, read_png, write_png
from .jpeg import JpegConfig, codec_decode, codec_encode, format_table, jpeg_simulate
from .metrics import compression_report, format_metrics, psnr, rgb_ssim
from .training import PairedSample, TrainConfig, evaluate, raw_psnr, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ENV = "INVISP_CONFIG"

log = logging.getLogger("invisp")


class UsageError(Exception):
    pass


@contextmanager
def output_guard(*paths):
    """Delete listed outputs that did not exist beforehand if the body raises."""
    fresh = [Path(p) for p in paths if p is not None and not Path(p).exists()]
    try:
        yield
    except BaseException:
        for p in fresh:
            if p.is_file():
                p.unlink()
        raise


def _emit(metrics: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(metrics, sort_keys=False, default=float))
    else:
        print(format_metrics(metrics))


# subcommands ------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    with output_guard(out / "manifest.json"):
        images = synth.synth_data(args.count, args.size, args.seed, out)
    print(f"wrote {len(images)} pairs to {out}")
    return EXIT_OK


def _load_pairs(root) -> list[PairedSample]:
    return [PairedSample.from_frame(item.frame, item.target) for item in synth.read_dataset(root)]


def _train_config(args) -> TrainConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    base = TrainConfig.from_file(path).to_dict() if path else {}
    overrides = {
        "steps": args.steps,
        "lam": args.lam,
        "lr": args.lr,
        "batch": args.batch,
        "crop": args.crop,
        "seed": args.seed,
        "jpeg_quality": args.quality,
        "inverse_source": args.inverse_source,
        "checkpoint_every": args.checkpoint_every,
        "conv_init": args.conv_init,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_jpeg:
        base["jpeg_in_loop"] = False
    base["checkpoint_path"] = str(args.out)
    base["log_path"] = str(args.log) if args.log else str(Path(args.out).with_suffix(".csv"))
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = _load_pairs(args.data)
    held = _load_pairs(args.eval_data) if args.eval_data else None
    with output_guard(cfg.checkpoint_path, cfg.log_path):
        result = train(data, cfg)
    print(f"trained {len(result.history)} steps -> {cfg.checkpoint_path}")
    if held:
        _emit(evaluate(result.model, held, cfg.jpeg_quality), args.json)
    return EXIT_OK


def _render_array(model, frame: isp.BayerFrame) -> np.ndarray:
    return np.clip(model_forward(model, isp.preprocess(frame)).data.astype(np.float64), 0.0, 1.0)


def _store(rgb: np.ndarray, out: Path, args) -> bytes:
    if args.png:
        write_png(out, rgb, bits=args.png_bits)
        return out.read_bytes()
    data = codec_encode(rgb, JpegConfig(quality=args.quality))
    out.write_bytes(data)
    return data


def cmd_render(args) -> int:
    model = load_checkpoint(args.model)
    frame = isp.read_bayer(args.bayer, args.meta)
    out = Path(args.out)
    meta_out = isp.sidecar_path(out)
    with output_guard(out, meta_out):
        rgb = _render_array(model, frame)
        data = _store(rgb, out, args)
        isp.write_metadata(meta_out, frame)
    _emit(compression_report(frame, len(data)).to_dict(), args.json)
    return EXIT_OK


def _load_rgb(path: Path) -> ad.Tensor:
    if path.suffix.lower() in (".jpg", ".jpeg"):
        img = codec_decode(path.read_bytes())
    else:
        img = ad.Tensor(read_png(path)[None])
    if img.shape[1] != 3:
        raise ValueError(f"{path}: expected a 3-channel image, got {img.shape[1]} channel(s)")
    return img


def cmd_invert(args) -> int:
    src = Path(args.input)
    meta = isp.read_metadata(args.meta or isp.sidecar_path(src))
    model = load_checkpoint(args.model)
    rgb = _load_rgb(src)
    like = isp.template_frame(meta, *rgb.shape[2:])
    out = Path(args.out)
    with output_guard(out, isp.sidecar_path(out)):
        x_hat = model_inverse(model, rgb).data.astype(np.float64)
        frame = isp.postprocess(x_hat, like)
        isp.write_bayer(out, frame)
    result = {"output": str(out)}
    if args.reference:
        ref = isp.read_bayer(args.reference)
        if ref.shape != frame.shape:
            raise ValueError(f"reference is {ref.shape}, recovered frame is {frame.shape}")
        result["raw_psnr"] = raw_psnr(x_hat, isp.preprocess(ref).data)
        result["mosaic_psnr"] = psnr(frame.mosaic, ref.mosaic)
        result["mosaic_max_abs"] = float(np.max(np.abs(frame.mosaic - ref.mosaic)))
    _emit(result, args.json)
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = load_checkpoint(args.model)
    frame = isp.read_bayer(args.bayer, args.meta)
    out_dir = Path(args.out_dir) if args.out_dir else None
    suffix = ".png" if args.png else ".jpg"
    stem = Path(args.bayer).stem
    paths = [out_dir / f"{stem}_rendered{suffix}", out_dir / f"{stem}_recovered.pgm"] if out_dir else []
    with output_guard(*paths, *(isp.sidecar_path(p) for p in paths)):
        rgb = _render_array(model, frame)
        if args.png:
            codes = np.rint(rgb * ((1 << args.png_bits) - 1))
            stored = ad.Tensor(codes / ((1 << args.png_bits) - 1))
            nbytes = None
            if out_dir:
                out_dir.mkdir(parents=True, exist_ok=True)
                write_png(paths[0], rgb, bits=args.png_bits)
                nbytes = paths[0].stat().st_size
        else:
            data = codec_encode(rgb, JpegConfig(quality=args.quality))
            stored = codec_decode(data)
            nbytes = len(data)
            if out_dir:
                out_dir.mkdir(parents=True, exist_ok=True)
                paths[0].write_bytes(data)
        x_hat = model_inverse(model, stored).data.astype(np.float64)
        recovered = isp.postprocess(x_hat, frame)
        if out_dir:
            isp.write_metadata(isp.sidecar_path(paths[0]), frame)
            isp.write_bayer(paths[1], recovered)
    result = {
        "raw_psnr": raw_psnr(x_hat, isp.preprocess(frame).data),
        "mosaic_psnr": psnr(recovered.mosaic, frame.mosaic),
        "mosaic_max_abs": float(np.max(np.abs(recovered.mosaic - frame.mosaic))),
    }
    if nbytes:
        result.update(compression_report(frame, nbytes).to_dict())
    _emit(result, args.json)
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = Path(args.reference), Path(args.test)
    if a.suffix.lower() == ".pgm" or b.suffix.lower() == ".pgm":
        fa, fb = isp.read_bayer(a), isp.read_bayer(b)
        if fa.shape != fb.shape:
            raise ValueError(f"shape mismatch {fa.shape} vs {fb.shape}")
        result = {
            "raw_psnr": raw_psnr(isp.preprocess(fb).data, isp.preprocess(fa).data),
            "mosaic_psnr": psnr(fb.mosaic, fa.mosaic),
        }
    else:
        ia, ib = read_image(a), read_image(b)
        if ia.shape != ib.shape:
            raise ValueError(f"shape mismatch {ia.shape} vs {ib.shape}")
        result = {"psnr": psnr(ib, ia), "ssim": rgb_ssim(ib, ia)}
    if args.bayer:
        frame = isp.read_bayer(args.bayer)
        result.update(compression_report(frame, b.stat().st_size).to_dict())
    _emit(result, args.json)
    return EXIT_OK


def cmd_jpegsim(args) -> int:
    cfg = JpegConfig(quality=args.quality, fourier_terms=args.terms)
    if args.dump_tables:
        luma, chroma = cfg.component_tables(2)
        print(f"# luminance table, Q={args.quality}\n{format_table(luma)}")
        print(f"# chrominance table, Q={args.quality}\n{format_table(chroma)}")
        if not args.input:
            return EXIT_OK
    img = ad.Tensor(read_image(args.input)[None])
    out = Path(args.out)
    with output_guard(out):
        sim = jpeg_simulate(img, cfg, rounding=args.rounding).data.astype(np.float64)
        write_png(out, np.clip(sim, 0.0, 1.0), bits=8)
    _emit({"psnr_vs_input": psnr(np.clip(sim, 0, 1), img.data.astype(np.float64))}, args.json)
    return EXIT_OK


# argument parsing -------------------------------------------------------------


def _add_store_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--quality", "-q", type=int, default=90, help="JPEG quality factor (1-100)")
    p.add_argument("--png", action="store_true", help="store a lossless PNG instead of a JPEG")
    p.add_argument("--png-bits", type=int, choices=(8, 16), default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invisp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the procedural paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a flow on a synth-data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help=f"JSON or key=value config (default: ${CONFIG_ENV})")
    p.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    p.add_argument("--eval-data", help="held-out synth-data directory to evaluate after training")
    p.add_argument("--steps", type=int)
    p.add_argument("--lam", "--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quality", type=int)
    p.add_argument("--no-jpeg", action="store_true", help="train without the JPEG simulator")
    p.add_argument("--inverse-source", choices=("prediction", "target"))
    p.add_argument("--conv-init", choices=("rotation", "identity", "permutation"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="RAW container -> JPEG (or PNG) through the forward pass")
    p.add_argument("--model", required=True)
    p.add_argument("--bayer", required=True)
    p.add_argument("--meta", help="sidecar JSON (default: next to the PGM)")
    p.add_argument("--out", required=True)
    _add_store_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("invert", help="JPEG/PNG -> RAW container through the inverse pass")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--meta", help="capture metadata JSON (default: input path with .json)")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="original Bayer container for RAW PSNR")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("roundtrip", help="render then invert, reporting RAW fidelity")
    p.add_argument("--model", required=True)
    p.add_argument("--bayer", required=True)
    p.add_argument("--meta")
    p.add_argument("--out-dir", help="keep the intermediate image and the recovered container here")
    _add_store_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images or two Bayer containers")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--bayer", help="source container; adds a compression report for TEST")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("jpegsim", help="run the differentiable JPEG simulator on an image")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--quality", "-q", type=int, default=90)
    p.add_argument("--terms", type=int, default=10, help="Fourier rounding terms K")
    p.add_argument("--rounding", choices=("fourier", "round", "identity"), default="fourier")
    p.add_argument("--dump-tables", action="store_true", help="print the scaled quantisation tables")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_jpegsim)

    return parser


def validate(args) -> None:
    """Flag checks done before any file is read or written."""
    q = getattr(args, "quality", None)
    if q is not None and not 1 <= q <= 100:
        raise UsageError("--quality must be in [1, 100]")
    if args.command == "synth-data":
        if args.count < 1:
            raise UsageError("--count must be positive")
        if args.size < 2 or args.size % 2:
            raise UsageError("--size must be even")
    if args.command == "jpegsim":
        if args.terms < 1:
            raise UsageError("--terms must be >= 1")
        if not args.dump_tables and not (args.input and args.out):
            raise UsageError("jpegsim needs --input and --out (or --dump-tables)")
        if bool(args.input) != bool(args.out):
            raise UsageError("--input and --out must be given together")
    if args.command == "train" and args.no_jpeg and args.inverse_source == "target":
        raise UsageError("--inverse-source has no effect with --no-jpeg")
    if args.command == "render":
        want = ".png" if args.png else (".jpg", ".jpeg")
        if not str(args.out).lower().endswith(want):
            raise UsageError(f"--out should end with {want}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        validate(args)
        return args.func(args)
    except UsageError as exc:
        print(f"invisp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"invisp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"invisp: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
