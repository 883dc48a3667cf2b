"""Print the pooled vs unpooled budget for each decoder profile and a tile-budget sweep."""

import argparse

from tilepool.budget import LLM_PROFILES, build_budget_report
from tilepool.tiling import TilingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-tiles", type=int, nargs="+", default=[1, 4, 6, 9, 12, 16, 24])
    args = ap.parse_args()

    for name, llm in LLM_PROFILES.items():
        print(f"== profile {name}: {llm}")
        print(build_budget_report(llm=llm).table())

    llm = LLM_PROFILES["table1"]
    print(f"{'tiles':>5} {'tokens':>8} {'pooled':>8} {'TFLOPs':>8} {'pooled':>8} {'flops x':>8} {'overall x':>9}")
    for n in args.max_tiles:
        r = build_budget_report(TilingConfig(max_tiles=n), 182, llm)
        print(f"{n:>5} {r.tokens_unpooled:>8} {r.tokens_pooled:>8} "
              f"{r.prefill_flops_unpooled / 1e12:>8.2f} {r.prefill_flops_pooled / 1e12:>8.2f} "
              f"{r.flops_ratio:>8.2f} {r.overall_ratio:>9.2f}")


if __name__ == "__main__":
    main()
