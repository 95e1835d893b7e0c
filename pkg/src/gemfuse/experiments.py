"""Seed-pinned robustness experiment: fused model versus single-modality models.

Three detectors are trained on the same synthetic split. The fused one (``sa``)
sees modality-a corruptions during training; the single-modality ones train on
clean data. All are then evaluated clean, with modality a blanked, and under
lighting corruption of modality a.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from . import dataeval as de
from .model import Detector, ModelConfig, TrainCorruption, train
from .preproc import RshConfig


@dataclass(frozen=True)
class RobustnessConfig:
    n_train: int = 400
    n_test: int = 100
    train_seed: int = 1
    test_seed: int = 2
    model_seed: int = 0
    eval_seed: int = 0
    fused_mode: str = "sa"
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    trials: int = 10
    # per-sample probabilities of corrupting modality a while training the fused model
    augmentation: dict = field(default_factory=lambda: {"rsh": 0.4, "blank": 0.2})
    rsh: RshConfig = field(default_factory=RshConfig)
    scene: de.SceneConfig = field(default_factory=de.SceneConfig)


@dataclass
class RobustnessResult:
    maps: dict[str, float]
    certainty_blank_a: dict | None
    seconds: float
    config: dict

    @staticmethod
    def drop(clean: float, corrupted: float) -> float:
        return (clean - corrupted) / clean if clean > 0 else 0.0

    @property
    def fused_rsh_drop(self) -> float:
        return self.drop(self.maps["fused/clean"], self.maps["fused/rsh_a"])

    @property
    def single_a_rsh_drop(self) -> float:
        return self.drop(self.maps["single-a/clean"], self.maps["single-a/rsh_a"])

    @property
    def blank_ratio(self) -> float:
        ref = self.maps["single-b/clean"]
        return self.maps["fused/blank_a"] / ref if ref > 0 else 0.0


def _train(mode: str, cfg: RobustnessConfig, samples, augmentation=None, log=None) -> Detector:
    model = Detector.init(ModelConfig(mode=mode, n_classes=cfg.scene.n_classes), cfg.model_seed)
    train(model, samples, cfg.epochs, cfg.batch_size, cfg.lr, cfg.model_seed, augmentation=augmentation, log=log)
    return model


def run_robustness(cfg: RobustnessConfig = RobustnessConfig(), log=print) -> RobustnessResult:
    start = time.perf_counter()
    train_set = de.generate_dataset(cfg.scene, cfg.n_train, cfg.train_seed)
    test_set = de.generate_dataset(cfg.scene, cfg.n_test, cfg.test_seed)
    aug = TrainCorruption("a", dict(cfg.augmentation), de.CorruptionSpec("rsh", "a", cfg.rsh))

    def stamp(msg):
        if log:
            log(f"[{time.perf_counter() - start:7.1f}s] {msg}")

    def ev(model, mode, trials=1):
        spec = de.CorruptionSpec(mode, "a", cfg.rsh)
        return de.evaluate(model, test_set, spec, trials=trials, seed=cfg.eval_seed)

    maps: dict[str, float] = {}
    stamp(f"training {cfg.fused_mode}")
    fused = _train(cfg.fused_mode, cfg, train_set, aug)
    maps["fused/clean"] = ev(fused, "none").map
    blank = ev(fused, "blank")
    maps["fused/blank_a"] = blank.map
    maps["fused/rsh_a"] = ev(fused, "rsh", cfg.trials).map
    stamp("training single-a")
    single_a = _train("single-a", cfg, train_set)
    maps["single-a/clean"] = ev(single_a, "none").map
    maps["single-a/rsh_a"] = ev(single_a, "rsh", cfg.trials).map
    stamp("training single-b")
    maps["single-b/clean"] = ev(_train("single-b", cfg, train_set), "none").map
    stamp("done")
    return RobustnessResult(maps, blank.certainty, time.perf_counter() - start, asdict(cfg))
