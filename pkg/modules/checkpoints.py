"""
Checkpoint Module
Serialized network parameters with an embedded config fingerprint
"""

import os
import json
import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Optional

import torch

from .errors import StateError

logger = logging.getLogger(__name__)


def config_fingerprint(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config dict"""
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class NetworkCheckpoint:
    """Parameters and provenance of a generator, translator or segmenter"""
    kind: str
    config: Dict[str, Any]
    states: Dict[str, Dict[str, torch.Tensor]]
    stage: int = 0
    step: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)
    fingerprint: str = ''
    path: Optional[str] = None

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = config_fingerprint(self.config)

    def verify(self, config: Optional[Dict[str, Any]] = None):
        """Raise StateError if the stored fingerprint does not match the config"""
        expected = config_fingerprint(config if config is not None else self.config)
        if expected != self.fingerprint:
            raise StateError(
                f"Checkpoint fingerprint {self.fingerprint[:12]} does not match config {expected[:12]}",
                path=self.path
            )

    def save(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        payload = {
            'kind': self.kind,
            'config': self.config,
            'fingerprint': self.fingerprint,
            'stage': self.stage,
            'step': self.step,
            'metadata': dict(self.metadata, saved_at=datetime.utcnow().isoformat()),
            'states': self.states
        }
        torch.save(payload, path)
        self.path = path
        logger.info(f"Saved {self.kind} checkpoint (stage={self.stage}, step={self.step}) to {path}")
        return path

    @classmethod
    def load(cls, path: str, expected_kind: Optional[str] = None) -> 'NetworkCheckpoint':
        if not os.path.exists(path):
            raise StateError(f"Checkpoint not found: {path}", path=path)

        payload = torch.load(path, map_location='cpu', weights_only=False)
        ckpt = cls(
            kind=payload['kind'],
            config=payload['config'],
            states=payload['states'],
            stage=payload.get('stage', 0),
            step=payload.get('step', 0),
            metadata=payload.get('metadata', {}),
            fingerprint=payload['fingerprint'],
            path=path
        )
        if expected_kind and ckpt.kind != expected_kind:
            raise StateError(f"Checkpoint {path} holds a {ckpt.kind}, expected {expected_kind}", path=path)
        ckpt.verify()
        return ckpt


def clone_state(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    """Detached CPU copy of a module's state dict"""
    return {key: value.detach().cpu().clone() for key, value in module.state_dict().items()}
