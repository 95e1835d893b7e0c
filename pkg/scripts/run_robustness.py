"""Train fused and single-modality detectors and print the robustness table.

    python scripts/run_robustness.py --epochs 60 --out runs/robustness.json
"""

import argparse
import dataclasses
import json
from pathlib import Path

from gemfuse.experiments import RobustnessConfig, run_robustness


def main() -> None:
    defaults = RobustnessConfig()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", default=defaults.fused_mode, help="fusion operator for the fused model")
    ap.add_argument("--epochs", type=int, default=defaults.epochs)
    ap.add_argument("--lr", type=float, default=defaults.lr)
    ap.add_argument("--trials", type=int, default=defaults.trials)
    ap.add_argument("--n-train", type=int, default=defaults.n_train)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = dataclasses.replace(
        defaults, fused_mode=args.mode, epochs=args.epochs, lr=args.lr, trials=args.trials, n_train=args.n_train
    )
    result = run_robustness(cfg)
    for key, value in result.maps.items():
        print(f"{key:16s} {value:.3f}")
    print(f"blank-a ratio    {result.blank_ratio:.3f}")
    print(f"rsh drop fused   {result.fused_rsh_drop:.1%}")
    print(f"rsh drop single  {result.single_a_rsh_drop:.1%}")
    print(f"certainty        {result.certainty_blank_a}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        doc = {**dataclasses.asdict(result), "blank_ratio": result.blank_ratio}
        args.out.write_text(json.dumps(doc, indent=2, default=str))


if __name__ == "__main__":
    main()
