"""Show the grid chosen for a range of image shapes and the scale change it implies."""

import argparse

from tilepool.tiling import TilingConfig, compute_overlap_geometry, plan_tiling

SHAPES = [(378, 378), (480, 640), (720, 1280), (910, 1176), (1080, 1920), (2480, 3508),
          (3000, 400), (400, 3000), (100, 100), (4000, 4000)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-tiles", type=int, default=12)
    args = ap.parse_args()
    cfg = TilingConfig(max_tiles=args.max_tiles)
    geo = compute_overlap_geometry(cfg)
    print(f"m_tot={geo.m_tot} s_win={geo.s_win} max_tiles={cfg.max_tiles}")
    print(f"{'h x w':>12} {'grid':>6} {'resized':>12} {'scale_h':>8} {'scale_w':>8}")
    for h, w in SHAPES:
        p = plan_tiling(h, w, cfg)
        print(f"{h:>5} x {w:<5} {p.rows:>2}x{p.cols:<3} {p.grid_h:>5} x {p.grid_w:<5} "
              f"{p.grid_h / h:>8.3f} {p.grid_w / w:>8.3f}")


if __name__ == "__main__":
    main()
