from pathlib import Path
from typing import Any, Dict, Iterable, List

import orjson


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for record in records:
            f.write(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY))
            f.write(b"\n")
    return path


def append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    with open(path, "ab") as f:
        f.write(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    with open(path, "rb") as f:
        return [orjson.loads(line) for line in f if line.strip()]
