from pathlib import Path
from typing import Any, Dict

import orjson
import pandas as pd

from src.dataio.loader import Dataset
from src.trainer.config import TrainSchedule
from src.trainer.stages import evaluate, train_all

VARIANTS = {"two_branch": False, "single_branch": True}


def run_decomposition_ablation(dataset: Dataset, schedule: TrainSchedule, out_dir: Path, split: str = "test") -> Dict[str, Any]:
    """Train the two-branch and single-branch models under one seed and budget, compare mouth-region PSNR."""
    out = Path(out_dir)
    if not dataset.split(split):
        split = "train"
    rows = []
    for variant, single in VARIANTS.items():
        print(f"🔬 Ablation variant '{variant}'")
        result = train_all(dataset, schedule, out / variant, single_branch=single)
        evaluation = evaluate(result.model, dataset, split, out / variant / "eval", schedule, verbose=schedule.verbose)
        rows.append({"variant": variant, **evaluation.summary, **{f"n_{k}": v for k, v in result.model.primitive_counts().items()}})

    table = pd.DataFrame(rows).set_index("variant")
    report: Dict[str, Any] = {"split": split, "variants": table.reset_index().to_dict(orient="records")}
    if "psnr_mouth" in table:
        gain = float(table.loc["two_branch", "psnr_mouth"] - table.loc["single_branch", "psnr_mouth"])
        report["mouth_psnr_gain"] = gain
        report["two_branch_not_worse"] = gain >= 0.0
    (out / "ablation.json").write_bytes(orjson.dumps(report, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    print(f"📊 Ablation report written to {out / 'ablation.json'}")
    return report
