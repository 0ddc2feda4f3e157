"""Run the desk-scale component ablation over several seeds and write a JSON summary.

    python scripts/run_desk_ablation.py --seeds 0 1 2 3 4 --out runs/desk_ablation
"""

import argparse
import json
import logging
import time
from pathlib import Path

from caw.evaluation import ablation_csv, format_ablation, write_json
from caw.experiment import DeskProtocol, run_seed, summarize


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--out", default="runs/desk_ablation")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    protocol = DeskProtocol(seeds=tuple(args.seeds))
    if args.epochs is not None:
        protocol.epochs = args.epochs
    if args.lr is not None:
        protocol.learning_rate = args.lr
    out = Path(args.out)
    reports = []
    t0 = time.time()
    for seed in protocol.seeds:
        rep = run_seed(protocol, seed)
        reports.append(rep)
        write_json(out / f"ablation_seed{seed}.json", rep.to_dict())
        (out / f"ablation_seed{seed}_robust.csv").write_text(ablation_csv(rep, "robust"))
        (out / f"ablation_seed{seed}_clean.csv").write_text(ablation_csv(rep, "clean"))
        print(f"seed {seed} ({time.time() - t0:.0f}s)\n{format_ablation(rep)}\n", flush=True)
    summary = summarize(reports)
    write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
