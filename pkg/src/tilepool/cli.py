"""Command-line front end: ``tilepool {tile,pipeline,budget,gradcheck,render}``."""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from tilepool.budget import DEFAULT_PROFILE, LLM_PROFILES, VitConfig, build_budget_report
from tilepool.connector import (
    MODES,
    GradCheckDims,
    connector_forward,
    grad_check,
    init_params,
    partition_neighborhoods,
    save_params,
)
from tilepool.features import EncoderConfig, FeatureStack, load_features, pseudo_encode, save_features
from tilepool.imaging import read_ppm, write_ppm
from tilepool.sequence import assemble_sequence
from tilepool.tiling import TilingConfig, compute_overlap_geometry, render_grid_overlay, tile_image

SEED_ENV = "TILEPOOL_SEED"


class CliError(Exception):
    pass


def write_atomic(path: Path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_image(path):
    try:
        return read_ppm(Path(path).read_bytes())
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from e


def _tiling_config(args) -> TilingConfig:
    try:
        return TilingConfig(base_h=args.base, base_w=args.base, patch=args.patch,
                            max_tiles=args.max_tiles, margin_left=args.margin_left,
                            margin_right=args.margin_right)
    except ValueError as e:
        raise CliError(f"invalid tiling options: {e}") from e


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None
    return args.seed


def tile_manifest(tiles, cfg: TilingConfig, names: list[str]) -> str:
    """Line-oriented manifest for a tile directory.

    ::

        plan <rows> <cols> <grid_h> <grid_w>
        base <base_h> <base_w>
        s_win <stride>
        m_tot <overlap>
        files <count>
        <file> thumbnail
        <file> tile <row> <col> <origin_y> <origin_x>   (one per tile, row-major)
    """
    geo = compute_overlap_geometry(cfg)
    p = tiles.plan
    lines = [
        f"plan {p.rows} {p.cols} {p.grid_h} {p.grid_w}",
        f"base {cfg.base_h} {cfg.base_w}",
        f"s_win {geo.s_win}",
        f"m_tot {geo.m_tot}",
        f"files {len(names)}",
        f"{names[0]} thumbnail",
    ]
    for i, (y, x) in enumerate(tiles.origins):
        lines.append(f"{names[i + 1]} tile {i // p.cols} {i % p.cols} {y} {x}")
    return "\n".join(lines) + "\n"


def cmd_tile(args) -> int:
    cfg = _tiling_config(args)
    tiles = tile_image(_read_image(args.input), cfg)
    out = Path(args.output)
    names = [f"crop_{i:03d}.ppm" for i in range(len(tiles.crops))]
    for name, crop in zip(names, tiles.crops):
        write_atomic(out / name, write_ppm(crop))
    write_atomic(out / "manifest.txt", tile_manifest(tiles, cfg, names))
    p = tiles.plan
    print(f"plan rows={p.rows} cols={p.cols} grid={p.grid_h}x{p.grid_w} crops={len(names)}")
    return 0


def pipeline_summary(stack: FeatureStack, pooled, seq, mode: str, d_l: int) -> str:
    """``key value`` lines describing one pipeline run."""
    nmap = partition_neighborhoods(*stack.grid)
    lines = [
        f"crops {stack.crops}",
        f"N {stack.n_patches}",
        f"M {nmap.n_groups}",
        f"pooled_grid {nmap.pooled_rows} {nmap.pooled_cols}",
        f"d_v {stack.d_v}",
        f"d_l {d_l}",
        f"mode {mode}",
        f"patch_tokens {seq.patch_count}",
        f"sequence_length {len(seq)}",
        f"pooled_rows_total {sum(p.shape[0] for p in pooled)}",
    ]
    return "\n".join(lines) + "\n"


def run_pipeline(args) -> dict[str, bytes | str]:
    seed = _seed(args)
    if args.features:
        try:
            stack = load_features(Path(args.features).read_bytes())
        except OSError as e:
            raise CliError(f"cannot read {args.features}: {e.strerror}") from e
        enc_bytes = None
    else:
        if not args.input:
            raise CliError("pipeline needs an input image or --features")
        cfg = _tiling_config(args)
        enc = EncoderConfig(base=cfg.base_h, patch=cfg.patch, d_v=args.d_v)
        stack = pseudo_encode(tile_image(_read_image(args.input), cfg), enc, seed)
        enc_bytes = save_features(stack)
    params = init_params(stack.d_v, args.d_l, seed)
    pooled = connector_forward(stack, params, args.mode)
    nmap = partition_neighborhoods(*stack.grid)
    seq = assemble_sequence(stack.crops - 1, nmap.pooled_rows, nmap.pooled_cols)
    pooled_stack = FeatureStack(
        [[p] for p in pooled], (0,), grid_shape=(nmap.pooled_rows, nmap.pooled_cols)
    )
    outputs = {
        "pooled.jvf": save_features(pooled_stack),
        "params.jvp": save_params(params),
        "sequence.txt": seq.to_text(),
        "summary.txt": pipeline_summary(stack, pooled, seq, args.mode, args.d_l),
    }
    if enc_bytes is not None:
        outputs["features.jvf"] = enc_bytes
    return outputs


def cmd_pipeline(args) -> int:
    outputs = run_pipeline(args)
    out = Path(args.output)
    for name, data in outputs.items():
        write_atomic(out / name, data)
    sys.stdout.write(outputs["summary.txt"])
    return 0


def cmd_budget(args) -> int:
    cfg = _tiling_config(args)
    report = build_budget_report(cfg, args.pooled_per_crop, LLM_PROFILES[args.profile],
                                 VitConfig(nonembed_params=args.vit_params,
                                           tokens_per_crop=(cfg.base_h // cfg.patch) ** 2))
    if args.format == "json":
        text = report.to_json()
    elif args.format == "table":
        text = report.table()
    else:
        text = report.to_text()
    if args.output:
        write_atomic(Path(args.output), text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    dims = GradCheckDims(d_v=args.d_v, d_l=args.d_l, grid_h=args.grid, grid_w=args.grid, crops=args.crops)
    ok = True
    for mode in (MODES if args.mode == "both" else (args.mode,)):
        report = grad_check(_seed(args), dims, mode=mode, eps=args.eps)
        print("\n".join(report.lines()))
        ok &= report.passed
    return 0 if ok else 1


def cmd_render(args) -> int:
    overlay = render_grid_overlay(_read_image(args.input), _tiling_config(args))
    write_atomic(Path(args.output), write_ppm(overlay))
    print(f"overlay {overlay.height}x{overlay.width} -> {args.output}")
    return 0


def _add_tiling_flags(p: argparse.ArgumentParser):
    d = TilingConfig()
    p.add_argument("--base", type=int, default=d.base_h, help="tile side in pixels")
    p.add_argument("--patch", type=int, default=d.patch, help="patch side in pixels")
    p.add_argument("--max-tiles", type=int, default=d.max_tiles, help="tile budget")
    p.add_argument("--margin-left", type=int, default=d.margin_left, help="overlap margin, patches")
    p.add_argument("--margin-right", type=int, default=d.margin_right, help="overlap margin, patches")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="tilepool", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="split an image into thumbnail + overlapping tiles", formatter_class=fmt)
    p.add_argument("input", help="PPM/PGM image")
    p.add_argument("--output", "-o", required=True, help="output directory")
    _add_tiling_flags(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("pipeline", help="tile, encode, pool and lay out visual tokens", formatter_class=fmt)
    p.add_argument("input", nargs="?", help="PPM/PGM image (omit with --features)")
    p.add_argument("--features", help="JVF1 encoder features to use instead of the image")
    p.add_argument("--output", "-o", required=True, help="output directory")
    p.add_argument("--d-v", type=int, default=8, help="encoder feature width")
    p.add_argument("--d-l", type=int, default=16, help="decoder embedding width")
    p.add_argument("--mode", choices=MODES, default="local", help="attention key scope")
    p.add_argument("--seed", type=int, default=0, help=f"RNG seed (overridden by ${SEED_ENV})")
    _add_tiling_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("budget", help="token, FLOPs and KV-cache budget", formatter_class=fmt)
    p.add_argument("--profile", choices=sorted(LLM_PROFILES), default=DEFAULT_PROFILE, help="decoder profile")
    p.add_argument("--pooled-per-crop", type=int, default=182, help="visual tokens per crop after pooling")
    p.add_argument("--vit-params", type=float, default=VitConfig().nonembed_params, help="encoder parameters")
    p.add_argument("--format", choices=("text", "json", "table"), default="text", help="output format")
    p.add_argument("--output", "-o", help="also write the report here")
    _add_tiling_flags(p)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference connector gradients", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help=f"RNG seed (overridden by ${SEED_ENV})")
    p.add_argument("--d-v", type=int, default=4, help="feature width")
    p.add_argument("--d-l", type=int, default=6, help="output width")
    p.add_argument("--grid", type=int, default=5, help="patch grid side")
    p.add_argument("--crops", type=int, default=2, help="number of crops")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--mode", choices=(*MODES, "both"), default="both", help="attention key scope")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="draw the tile grid over the resized image", formatter_class=fmt)
    p.add_argument("input", help="PPM/PGM image")
    p.add_argument("--output", "-o", required=True, help="output PPM")
    _add_tiling_flags(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"tilepool {args.command}: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"tilepool {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
