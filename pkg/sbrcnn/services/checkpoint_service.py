"""
Checkpoint storage service
Saves and restores model weights together with the config that built them
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import structlog
import torch

from sbrcnn.config import get_settings
from sbrcnn.exceptions import CheckpointError
from sbrcnn.schemas import ExperimentConfig

logger = structlog.get_logger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.pt"


class CheckpointService:
    """Service for writing and reading versioned checkpoint archives"""

    def __init__(self, root: Optional[Path] = None):
        settings = get_settings()
        self.root = Path(root) if root is not None else Path(settings.runs_root)

    def resolve(self, path: Path) -> Path:
        """Absolute paths stay as they are; relative ones live under the runs root"""
        path = Path(path)
        return path if path.is_absolute() or path.exists() else self.root / path

    def save(
        self,
        path: Path,
        model: torch.nn.Module,
        config: ExperimentConfig,
        epoch: int,
        extra: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """
        Write a checkpoint archive

        Args:
            path: Target file
            model: Model whose state_dict is stored
            config: Experiment config that produced the weights
            epoch: Last completed epoch
            extra: Additional JSON-compatible metadata

        Returns:
            The written path
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": config.model_dump(mode="json"),
            "epoch": epoch,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        }
        torch.save(payload, path)
        logger.info("checkpoint_saved", path=str(path), epoch=epoch)
        return path

    def load(self, path: Path, map_location: str = "cpu") -> Tuple[ExperimentConfig, Dict[str, Any]]:
        """
        Read a checkpoint archive

        Returns:
            (config, payload) where payload still holds state_dict, epoch and extra

        Raises:
            CheckpointError: Missing file, unreadable archive or version mismatch
        """
        given = Path(path)
        path = self.resolve(given)
        if not path.exists():
            where = str(given) if path == given else f"{given} (looked for {path})"
            raise CheckpointError(f"checkpoint not found: {where}")
        try:
            payload = torch.load(path, map_location=map_location, weights_only=True)
        except Exception as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if not isinstance(payload, dict) or "version" not in payload:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path} has checkpoint version {payload['version']}, expected {CHECKPOINT_VERSION}"
            )
        try:
            config = ExperimentConfig.model_validate(payload["config"])
        except Exception as e:
            raise CheckpointError(f"{path} carries an invalid config: {e}") from e
        return config, payload

    def restore(self, path: Path, model: torch.nn.Module, map_location: str = "cpu") -> int:
        """Load weights into an existing model; returns the stored epoch"""
        _, payload = self.load(path, map_location)
        try:
            model.load_state_dict(payload["state_dict"])
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint weights do not fit the model: {e}") from e
        return int(payload.get("epoch", 0))
