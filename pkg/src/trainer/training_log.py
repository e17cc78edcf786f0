import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from tqdm import tqdm

from src.dataio.jsonl import append_jsonl
from src.losses.image_losses import StageLoss


class TrainingLogger:
    """JSON-lines training log plus tqdm progress; silent apart from the file when not verbose."""

    def __init__(self, path: Optional[Path] = None, verbose: bool = True, log_every: int = 10):
        self.path = Path(path) if path is not None else None
        self.verbose = verbose
        self.log_every = log_every
        self.records: List[Dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(b"")

    def progress(self, iterations: int, desc: str) -> Iterable[int]:
        return tqdm(range(iterations), desc=desc, disable=not self.verbose, leave=False)

    def info(self, message: str) -> None:
        if self.verbose:
            print(message)

    def log_step(
        self,
        stage: str,
        branch: str,
        iteration: int,
        loss: StageLoss,
        n_primitives: int,
        frame: int,
        window: Optional[Tuple[float, float]] = None,
    ) -> None:
        """Every log_every-th iteration, plus every incrementally sampled one."""
        if iteration % self.log_every != 0 and window is None:
            return
        record = {
            "iter": iteration,
            "stage": stage,
            "branch": branch,
            **loss.record(),
            "n_primitives": n_primitives,
            "frame": frame,
            "window_lo": window[0] if window else None,
            "window_hi": window[1] if window else None,
        }
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                append_jsonl(self.path, record)
