"""
Ablation harness: run the toy recipe once per arm of a sweep and tabulate
BLEU and AUC side by side.

``binflow-ablate --sweep flow --workdir runs/ablate --config configs/toy.conf``
"""

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
from loguru import logger

from binflow.config import load_run_config
from binflow.pipeline import BinFlow
from binflow.utils.io import atomic_write_text
from binflow.utils.normalizer import RULE_CASES


@dataclass(frozen=True)
class AblationArm:
    axis: str
    name: str
    overrides: Tuple[str, ...] = field(default_factory=tuple)


FLOW_ARMS = (
    AblationArm("flow", "3-scf", ("flow.variant=scf", "flow.count=3")),
    AblationArm("flow", "3-glow", ("flow.variant=glow", "flow.count=3")),
    AblationArm("flow", "5-scf", ("flow.variant=scf", "flow.count=5")),
    AblationArm("flow", "5-glow", ("flow.variant=glow", "flow.count=5")),
    AblationArm("flow", "none", ("flow.variant=none",)),
)
RULE_ARMS = tuple(AblationArm("rules", case, (f"rules={case}",)) for case in RULE_CASES)
DIM_ARMS = tuple(AblationArm("dim", str(dim), (f"model.dim={dim}",)) for dim in (32, 64, 128))

SWEEPS: Dict[str, Tuple[AblationArm, ...]] = {"flow": FLOW_ARMS, "rules": RULE_ARMS, "dim": DIM_ARMS}

COLUMNS = ["axis", "arm", "bleu", "mean_precision", "auc", "error"]


def run_arm(
    arm: AblationArm,
    workdir: Union[str, Path],
    config_file: Optional[str] = None,
    overrides: Iterable[str] = (),
    detection: bool = True,
) -> Dict[str, float]:
    config = load_run_config(config_file, [*overrides, *arm.overrides], manifest=str(Path(workdir) / "run.manifest"))
    logger.info(f"Ablation arm {arm.axis}={arm.name}")
    return BinFlow(config).recipe(Path(workdir) / arm.axis / arm.name, detection=detection)


def run_ablation(
    arms: Sequence[AblationArm],
    workdir: Union[str, Path],
    config_file: Optional[str] = None,
    overrides: Iterable[str] = (),
    detection: bool = True,
) -> pd.DataFrame:
    """
    Run every arm to completion. A failing arm is logged and kept as a row
    with its error message so the remaining arms still run.
    """
    overrides = list(overrides)
    rows: List[dict] = []
    for arm in arms:
        row = {"axis": arm.axis, "arm": arm.name}
        try:
            results = run_arm(arm, workdir, config_file, overrides, detection)
            row.update({k: results.get(k) for k in ("bleu", "mean_precision", "auc")})
            row["error"] = ""
        except Exception as e:  # noqa: BLE001
            logger.error(f"Ablation arm {arm.axis}={arm.name} failed: {e}")
            row["error"] = str(e)
        rows.append(row)
    return pd.DataFrame(rows, columns=COLUMNS)


def ablation_table(frame: pd.DataFrame) -> str:
    return frame.to_markdown(index=False, floatfmt=".4f")


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="binflow-ablate", description="Run an ablation sweep on the toy recipe.")
    parser.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--no-detection", action="store_true", help="translation arms only")
    parser.add_argument("--out", help="table prefix (default <workdir>/<sweep>)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    frame = run_ablation(SWEEPS[args.sweep], args.workdir, args.config, args.set, not args.no_detection)
    prefix = Path(args.out) if args.out else Path(args.workdir) / args.sweep
    table = ablation_table(frame)
    atomic_write_text(prefix.with_suffix(".md"), table + "\n")
    atomic_write_text(prefix.with_suffix(".csv"), frame.to_csv(index=False))
    print(table)
    return 1 if (frame["error"] != "").any() else 0


if __name__ == "__main__":
    sys.exit(main())
