from pathlib import Path
from typing import Dict, List, Sequence, Any

import numpy as np
import pandas as pd

from .logger import get_logger
from .pilotwave import Trajectory

logger = get_logger("CSV_WRITER")

# 17 significant digits round-trip every double.
FLOAT_FORMAT = "%.17g"


class SimulationCSVWriter:
    """
    CSV writer for simulation outputs.
    Writes sampled trajectories, quantum-potential field grids and sweep summaries
    into one output directory with deterministic formatting.
    """

    def __init__(self, csv_directory: str = "output"):
        self.csv_directory = Path(csv_directory)
        self.csv_directory.mkdir(parents=True, exist_ok=True)
        logger.debug(f"CSV writer initialized in {self.csv_directory}")

    def _write(self, frame: pd.DataFrame, filename: str) -> Path:
        path = self.csv_directory / filename
        try:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="nan")
        except OSError as e:
            logger.error(f"Failed to write {path}: {e}")
            raise
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_trajectories(self, trajectories: Sequence[Trajectory], filename: str = "trajectories.csv") -> Path:
        """
        One row per sample: trajectory_id, t, x, y, [pointer_y,] flag.

        The flag is the detector label on the detector-entry row,
        node_degenerate on every row of a flagged trajectory, and ok otherwise.
        """
        has_pointer = any(tr.pointer is not None for tr in trajectories)
        frames = []
        for trajectory in trajectories:
            count = trajectory.times.size
            flags = np.full(count, "ok", dtype=object)
            if trajectory.node_degenerate:
                flags[:] = "node_degenerate"
            elif trajectory.terminal is not None:
                flags[-1] = trajectory.terminal
            columns = {
                "trajectory_id": np.full(count, trajectory.index),
                "t": trajectory.times,
                "x": trajectory.particle[:, 0],
                "y": trajectory.particle[:, 1],
            }
            if has_pointer:
                columns["pointer_y"] = trajectory.pointer if trajectory.pointer is not None else np.full(count, np.nan)
            columns["flag"] = flags
            frames.append(pd.DataFrame(columns))
        if frames:
            frame = pd.concat(frames, ignore_index=True)
        else:
            header = ["trajectory_id", "t", "x", "y"] + (["pointer_y"] if has_pointer else []) + ["flag"]
            frame = pd.DataFrame(columns=header)
        return self._write(frame, filename)

    def write_fields(self, grid: Dict[str, np.ndarray], filename: str = "fields.csv") -> Path:
        """Field grid columns x, y, Q, R2."""
        frame = pd.DataFrame({key: np.asarray(grid[key]) for key in ("x", "y", "Q", "R2")})
        return self._write(frame, filename)

    def write_sweep_summary(self, rows: List[Dict[str, Any]], filename: str = "sweep_summary.csv") -> Path:
        """One row per swept value."""
        columns = ["value", "P_D1", "P_D2", "straight_channel_1", "straight_channel_2", "status"]
        frame = pd.DataFrame(rows, columns=columns)
        return self._write(frame, filename)

    def read_trajectories(self, filename: str = "trajectories.csv") -> pd.DataFrame:
        path = self.csv_directory / filename
        if not path.exists():
            return pd.DataFrame()
        return pd.read_csv(path)
