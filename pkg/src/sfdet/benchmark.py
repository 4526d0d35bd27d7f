"""Synthetic domain-shift benchmark: datasets, source/oracle detectors, TAMs
and adaptation runs for one seed, with optional on-disk caching.

Everything is derived from ``seed``; the scene content of the target splits
does not depend on the severity, so severities differ only in the shift.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sfdet import adapt, detector as det, tam as tam_mod
from sfdet.datagen import LabeledBox, make_split, preset
from sfdet.params import ParamSet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkScale:
    n_source: int = 800
    n_target_train: int = 400
    n_target_val: int = 200
    image_size: int = 64
    max_objects: int = 4
    source_epochs: int = 30
    oracle_epochs: int = 30
    tam_steps: int = 600
    tam_lr: float = 1e-3

    def tag(self) -> str:
        return "-".join(f"{v}" for v in asdict(self).values())


@dataclass
class Split:
    images: np.ndarray
    labels: list[list[LabeledBox]]

    @classmethod
    def from_pairs(cls, pairs) -> "Split":
        return cls(np.stack([p[0] for p in pairs]).astype(np.float32), [list(p[1]) for p in pairs])


@dataclass
class Benchmark:
    seed: int = 0
    scale: BenchmarkScale = BenchmarkScale()
    cache_dir: Path | None = None
    _memo: dict = field(default_factory=dict, repr=False)

    def _split_seed(self, role: int) -> int:
        return 1000 * self.seed + role

    def _split(self, key: str, n: int, role: int, severity: str | None) -> Split:
        memo_key = ("split", key, severity)
        if memo_key not in self._memo:
            shift = preset(severity) if severity else None
            pairs = make_split(n, self._split_seed(role), shift, self.scale.image_size, self.scale.max_objects)
            self._memo[memo_key] = Split.from_pairs(pairs)
        return self._memo[memo_key]

    def source_train(self) -> Split:
        return self._split("source", self.scale.n_source, 1, None)

    def target_train(self, severity: str) -> Split:
        return self._split("target_train", self.scale.n_target_train, 3, severity)

    def target_val(self, severity: str) -> Split:
        return self._split("target_val", self.scale.n_target_val, 2, severity)

    # ------------------------------------------------------------ models

    def _cached(self, name: str, build):
        if name in self._memo:
            return self._memo[name]
        path = None
        if self.cache_dir is not None:
            path = Path(self.cache_dir) / f"{name}-s{self.seed}-{self.scale.tag()}.ckpt"
            if path.exists():
                params, meta = load_checkpoint(path)
                self._memo[name] = (params, meta)
                return self._memo[name]
        params, meta = build()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, params, meta)
            # reload so cached and fresh runs see identical float32 values
            params, meta = load_checkpoint(path)
        self._memo[name] = (params, meta)
        return params, meta

    def source_model(self) -> ParamSet:
        def build():
            src = self.source_train()
            params, _ = det.train_detector(list(zip(src.images, src.labels)), self._det_cfg(),
                                           det.TrainConfig(epochs=self.scale.source_epochs), seed=self.seed)
            return params, self._det_cfg().to_meta()
        return self._cached("source", build)[0]

    def oracle_model(self, severity: str) -> ParamSet:
        """Source model fine-tuned on the labelled target training split."""
        def build():
            tgt = self.target_train(severity)
            params, _ = det.train_detector(list(zip(tgt.images, tgt.labels)), self._det_cfg(),
                                           det.TrainConfig(epochs=self.scale.oracle_epochs), seed=self.seed,
                                           init=self.source_model())
            return params, self._det_cfg().to_meta()
        return self._cached(f"oracle-{severity}", build)[0]

    def tam(self, severity: str, mode: str = "learned") -> tam_mod.TamParams:
        def build():
            x = self.target_train(severity).images
            cfg = tam_mod.TamConfig(steps=self.scale.tam_steps, lr=self.scale.tam_lr, mode=mode, seed=self.seed,
                                    log_every=0)
            tp, _ = tam_mod.train_tam(x, tam_mod.compute_style_image(x), cfg)
            return tp.params, tp.meta()
        params, meta = self._cached(f"tam-{mode}-{severity}", build)
        return tam_mod.TamParams(params, meta.get("mode", mode))

    def _det_cfg(self) -> det.DetectorConfig:
        return det.DetectorConfig(image_size=self.scale.image_size)

    # ------------------------------------------------------------ evaluation / runs

    def evaluate(self, params: ParamSet, severity: str) -> float:
        val = self.target_val(severity)
        return adapt.evaluate_map50(params, val.images, val.labels)

    def adapt(self, severity: str, config: adapt.AdaptConfig | None = None, **overrides) -> adapt.AdaptResult:
        config = (config or adapt.AdaptConfig(seed=self.seed)).replace(**overrides)
        train = self.target_train(severity)
        val = self.target_val(severity)
        tam = None if config.variant == "strong_weak" else self.tam(severity)
        log.info("adapt seed=%d severity=%s variant=%s align=%s", self.seed, severity, config.variant,
                 config.align)
        return adapt.run_adaptation(self.source_model(), train.images, val.images, val.labels, tam, config)
