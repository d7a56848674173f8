from __future__ import annotations

import hashlib
import json
import math
import os
from typing import Any, IO, List, Mapping, Optional

import pandas as pd

from cpmcmc.errors import TraceSinkError
from cpmcmc.samplers import TraceRecord, TraceSink

Key = str


def config_hash(config: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON of config, truncated to 16 hex characters"""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class OutputStore:
    """
    Output files are written under a given root directory, keyed by their path
    relative to it.

    Note this means that any path separators in the keys are interpreted as such.
    """

    def __init__(self, root_dir: str) -> None:
        self._root_dir = root_dir
        os.makedirs(root_dir, exist_ok=True)

    def full_path(self, key: Key) -> str:
        return os.path.join(self._root_dir, key)

    def write_csv(
        self, key: Key, df: pd.DataFrame, hash_: str, float_format: str = "%.10g"
    ) -> str:
        """
        Writes a comment line carrying the config hash, then the frame as RFC-4180 CSV.
        Returns the path written.
        """
        path = self.full_path(key)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, mode="w", encoding="utf-8", newline="") as f:
            f.write(f"# config_hash={hash_}\n")
            df.to_csv(f, index=False, float_format=float_format, lineterminator="\n")
        return path

    def read_csv(self, key: Key) -> pd.DataFrame:
        return pd.read_csv(self.full_path(key), comment="#")

    def trace_sink(self, key: Key) -> NdjsonTraceSink:
        return NdjsonTraceSink(self.full_path(key))


def read_config_hash(path: str) -> Optional[str]:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
    prefix = "# config_hash="
    return first[len(prefix) :] if first.startswith(prefix) else None


def _json_number(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def _json_vector(values: Any) -> List[Optional[float]]:
    return [_json_number(float(v)) for v in values]


class NdjsonTraceSink(TraceSink):
    """
    One JSON object per iteration:
    {"iter":n,"theta":[...],"acc":0|1,"logp_cur":x,"logp_prop":x}
    with "psi":[...] appended when the score error is recorded. Non-finite numbers
    are written as null.

    If a write fails, a "<path>.partial" marker file is created next to the output
    and TraceSinkError is raised.
    """

    def __init__(self, path: str) -> None:
        self._path = path
        self._file: Optional[IO[str]] = None
        self._last_iteration: Optional[int] = None
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._file = open(path, mode="w", encoding="utf-8", newline="\n")
        except OSError as e:
            self._mark_partial()
            raise TraceSinkError(path, None, e) from e

    def _mark_partial(self) -> None:
        try:
            with open(f"{self._path}.partial", mode="w", encoding="utf-8") as f:
                f.write(f"last_complete_iteration={self._last_iteration}\n")
        except OSError:
            pass

    def write(self, record: TraceRecord) -> None:
        line = {
            "iter": record.iteration,
            "theta": _json_vector(record.theta),
            "acc": int(record.accepted),
            "logp_cur": _json_number(record.logp_cur),
            "logp_prop": _json_number(record.logp_prop),
        }
        if record.psi is not None:
            line["psi"] = _json_vector(record.psi)
        try:
            if self._file is None:
                raise ValueError("The sink is closed")
            self._file.write(json.dumps(line, separators=(",", ":")) + "\n")
        except (OSError, ValueError) as e:
            self._mark_partial()
            raise TraceSinkError(self._path, record.iteration, e) from e
        self._last_iteration = record.iteration

    def close(self) -> None:
        if self._file is not None:
            try:
                self._file.close()
            except OSError as e:
                self._mark_partial()
                raise TraceSinkError(self._path, self._last_iteration, e) from e
            finally:
                self._file = None
