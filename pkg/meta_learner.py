"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

教師あり事前学習・メタ学習（内側適応と外側更新）・メタテスト（テスト時適応）
およびメタ学習なしの素朴なTTAベースライン
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import diff_engine as de
from diff_engine import LossGradFn, ParameterSet
from point_cloud import PointCloud
from pu_exceptions import ConfigurationError, DataError, DivergenceError, ParameterError
from sampling import SAMPLING_METHODS, downsample
from upsampler import Upsampler, loss_and_grad, predict

logger = logging.getLogger("mpu_tta.meta")

GRADIENT_MODES = ("first_order", "fd_hvp")
BATCH_REDUCTIONS = ("sum", "mean")
MAX_INNER_STEPS = 32

# 大規模バックボーン向けの学習率
LARGE_BACKBONE_ALPHA = 1e-5
LARGE_BACKBONE_BETA = 1e-6

# 内側・外側の目的関数は評価指標と同じ総和CD（事前学習は平均CD）
ADAPTATION_REDUCTION = "sum"


@dataclass
class MetaConfig:
    """
    メタ学習の設定

    alpha/betaのデフォルトは小さな参照バックボーンと総和CD向け。
    clip_grad_normは1ステップの移動量の上限（α·clip, β·clip）になる
    """
    alpha: float = 0.2
    beta: float = 1.0
    inner_steps: int = 5
    batch_size: int = 8
    gradient_mode: str = "first_order"
    ratio: int = 4
    max_meta_iters: int = 100
    seed: int = 0
    batch_reduction: str = "sum"
    clip_grad_norm: Optional[float] = 0.05
    sampling_method: str = "fps"
    workers: int = 1
    log_interval: int = 10

    def validate(self) -> "MetaConfig":
        if not (self.alpha >= 0.0 and math.isfinite(self.alpha)):
            raise ParameterError(f"alpha must be a finite nonnegative number, got {self.alpha}")
        if not (self.beta >= 0.0 and math.isfinite(self.beta)):
            raise ParameterError(f"beta must be a finite nonnegative number, got {self.beta}")
        if not (0 <= self.inner_steps <= MAX_INNER_STEPS):
            raise ParameterError(f"inner_steps must be in [0, {MAX_INNER_STEPS}], got {self.inner_steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ParameterError(f"gradient_mode must be one of {GRADIENT_MODES}, got '{self.gradient_mode}'")
        if self.batch_reduction not in BATCH_REDUCTIONS:
            raise ParameterError(f"batch_reduction must be one of {BATCH_REDUCTIONS}, got '{self.batch_reduction}'")
        if self.sampling_method not in SAMPLING_METHODS:
            raise ParameterError(f"sampling_method must be one of {SAMPLING_METHODS}, got '{self.sampling_method}'")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ParameterError(f"clip_grad_norm must be positive when set, got {self.clip_grad_norm}")
        if self.max_meta_iters < 0:
            raise ParameterError(f"max_meta_iters must be >= 0, got {self.max_meta_iters}")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")
        return self

    @classmethod
    def large_backbone_defaults(cls, **overrides) -> "MetaConfig":
        """大規模バックボーン向けの学習率（α=1e-5, β=1e-6）"""
        return replace(cls(alpha=LARGE_BACKBONE_ALPHA, beta=LARGE_BACKBONE_BETA), **overrides)


@dataclass(frozen=True)
class TrainingPair:
    """疎な入力X_nと密な正解Y_nの組"""
    x: PointCloud
    y: PointCloud

    def check(self, ratio: int, index: int) -> None:
        if self.y.count != ratio * self.x.count:
            raise DataError(
                f"dense cloud has {self.y.count} points, expected {ratio} x {self.x.count}",
                pair_index=index,
            )


@dataclass
class AdamState:
    """事前学習用Adamの状態（学習率はエポックごとに指数減衰）"""
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    base_lr: float = 1e-4
    decay: float = 0.99
    epoch: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, base_lr: float = 1e-4, decay: float = 0.99) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), base_lr=base_lr, decay=decay)

    @property
    def learning_rate(self) -> float:
        return self.base_lr * self.decay ** self.epoch


def adam_step(state: AdamState, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
    """Adamで1ステップ更新する（stateはその場で更新）"""
    state.m.check_schema(params, "adam_step")
    params.check_schema(grads, "adam_step")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.learning_rate / bc1

    m, v, updated = {}, {}, {}
    for name in params:
        g = grads[name]
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v[name] / bc2) + state.epsilon
        updated[name] = params[name] - step_size * m[name] / denom
    state.m = ParameterSet(m)
    state.v = ParameterSet(v)
    return ParameterSet(updated)


class TrainingLog:
    """
    反復ごとの記録（iter, loss, grad_norm, wall_ms）

    pathを渡すとタブ区切りで1行ずつ追記する
    """

    HEADER = "iter\tloss\tgrad_norm\twall_ms"

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.records: List[Dict[str, float]] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(self.HEADER + "\n", encoding="utf-8")

    def append(self, iteration: int, loss: float, grad_norm: float, wall_ms: float) -> None:
        record = {"iter": iteration, "loss": loss, "grad_norm": grad_norm, "wall_ms": wall_ms}
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(f"{iteration}\t{loss:.10g}\t{grad_norm:.10g}\t{wall_ms:.3f}\n")

    @property
    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class MetaTestResult:
    """メタテストの結果（適応後パラメータは予測後に破棄してよい）"""
    y: PointCloud
    adapted: ParameterSet
    adapt_ms: float
    infer_ms: float

    @property
    def total_ms(self) -> float:
        return self.adapt_ms + self.infer_ms


# ---------------------------------------------------------------------------
# 汎用の内側適応とメタ勾配
# ---------------------------------------------------------------------------

def clip_factor(grads: ParameterSet, max_norm: Optional[float]) -> float:
    """ノルムをmax_normに収めるための倍率（1.0なら切り詰めなし）"""
    if max_norm is None:
        return 1.0
    norm = grads.norm()
    if norm <= max_norm or norm == 0.0:
        return 1.0
    return max_norm / norm


def clip_by_norm(grads: ParameterSet, max_norm: Optional[float]) -> ParameterSet:
    factor = clip_factor(grads, max_norm)
    return grads if factor == 1.0 else grads.scale(factor)


def _sgd_trajectory(params: ParameterSet, loss_grad_fn: LossGradFn, steps: int, alpha: float,
                    clip_grad_norm: Optional[float]) -> Tuple[List[ParameterSet], List[float]]:
    # 実効学習率 α·(切り詰め倍率) もステップごとに返す
    trajectory = [params]
    rates: List[float] = []
    current = params
    for _ in range(steps):
        _, grads = loss_grad_fn(current)
        rate = alpha * clip_factor(grads, clip_grad_norm)
        current = de.axpy(-rate, grads, current)
        trajectory.append(current)
        rates.append(rate)
    return trajectory, rates


def sgd_adapt(params: ParameterSet, loss_grad_fn: LossGradFn, steps: int, alpha: float,
              clip_grad_norm: Optional[float] = None) -> List[ParameterSet]:
    """
    素のSGDで θ ← θ - α∇L(θ) をsteps回行う

    clip_grad_normを指定すると勾配ノルムをその値で切り詰める

    Returns:
        軌跡 [θ_0, θ_1, ..., θ_steps]（θ_0は入力そのもの）
    """
    return _sgd_trajectory(params, loss_grad_fn, steps, alpha, clip_grad_norm)[0]


def meta_gradient(params: ParameterSet, inner_fn: LossGradFn, outer_fn: LossGradFn, steps: int,
                  alpha: float, mode: str = "first_order",
                  clip_grad_norm: Optional[float] = None) -> Tuple[float, ParameterSet, ParameterSet]:
    """
    1タスク分の外側損失と外側勾配

    first_order: 適応後θ_nでの∇L_outerをそのまま使う
    fd_hvp: 内側ステップを逆順にたどり (I - α_k∇²L_inner(θ_k)) を差分HVPで掛ける
    （α_kは切り詰め後の実効学習率。切り詰め倍率自体の微分は無視する）

    Returns:
        (外側損失, θに関する外側勾配, 適応後パラメータθ_n)
    """
    if mode not in GRADIENT_MODES:
        raise ParameterError(f"gradient_mode must be one of {GRADIENT_MODES}, got '{mode}'")
    trajectory, rates = _sgd_trajectory(params, inner_fn, steps, alpha, clip_grad_norm)
    adapted = trajectory[-1]
    loss, grads = outer_fn(adapted)
    if mode == "fd_hvp" and alpha != 0.0:
        for theta_k, rate in zip(reversed(trajectory[:-1]), reversed(rates)):
            grads = de.axpy(-rate, de.hvp(inner_fn, theta_k, grads), grads)
    return loss, grads, adapted


def cosine_similarity(a: ParameterSet, b: ParameterSet) -> float:
    denom = a.norm() * b.norm()
    return 0.0 if denom == 0.0 else a.dot(b) / denom


# ---------------------------------------------------------------------------
# バックボーン向けの操作
# ---------------------------------------------------------------------------

def _check_pairs(data: Sequence[TrainingPair], ratio: int) -> None:
    if not data:
        raise DataError("training data is empty")
    for index, pair in enumerate(data):
        pair.check(ratio, index)


def inner_task_input(x: PointCloud, ratio: int, sampling_method: str = "fps", seed: int = 0) -> PointCloud:
    """自己教師タスクの入力 X↓ を作る"""
    return downsample(x, ratio, method=sampling_method, seed=seed)


def inner_loss_fn(model: Upsampler, x: PointCloud, sampling_method: str = "fps", seed: int = 0) -> LossGradFn:
    """内側損失 CD(F_θ(X↓), X)（総和）の (損失, 勾配) 関数"""
    x_down = inner_task_input(x, model.ratio, sampling_method, seed)
    return lambda params: loss_and_grad(model, x_down, x, params, ADAPTATION_REDUCTION)


def outer_loss_fn(model: Upsampler, pair: TrainingPair) -> LossGradFn:
    """外側損失 CD(F_θn(X_n), Y_n)（総和）の (損失, 勾配) 関数"""
    return lambda params: loss_and_grad(model, pair.x, pair.y, params, ADAPTATION_REDUCTION)


def inner_adapt(model: Upsampler, x: PointCloud, steps: int, alpha: float,
                sampling_method: str = "fps", clip_grad_norm: Optional[float] = None,
                params: Optional[ParameterSet] = None) -> ParameterSet:
    """
    入力点群だけを使った自己教師あり適応（モデル自体は変更しない）

    Args:
        model: バックボーン
        x: 入力点群（4r点以上）
        steps: SGDステップ数
        alpha: 内側学習率

    Returns:
        適応後パラメータθ_n
    """
    start = model.params if params is None else params
    if steps == 0:
        return start
    fn = inner_loss_fn(model, x, sampling_method)
    return sgd_adapt(start, fn, steps, alpha, clip_grad_norm)[-1]


def pretrain(model: Upsampler, data: Sequence[TrainingPair], epochs: int, adam: AdamState,
             batch_size: int = 8, seed: int = 0, log: Optional[TrainingLog] = None) -> Upsampler:
    """
    平均CDを損失とする教師あり事前学習（Adam）

    エポックごとに固定シードで並べ替え、ミニバッチ平均勾配で更新する。
    学習率はエポック終了ごとにdecay倍
    """
    if epochs == 0:
        return model
    _check_pairs(data, model.ratio)
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    params = model.params
    logger.info(f"🏋️ [事前学習] 開始: pairs={len(data)}, epochs={epochs}, lr={adam.learning_rate:g}")

    for epoch in range(epochs):
        started = time.perf_counter()
        order = np.random.default_rng(seed + epoch).permutation(len(data))
        epoch_losses, last_norm = [], 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            results = [loss_and_grad(model, data[i].x, data[i].y, params) for i in batch]
            grads = de.add_all([g for _, g in results]).scale(1.0 / len(batch))
            bad = grads.first_nonfinite()
            if bad is not None:
                raise DivergenceError(epoch, int(batch[0]), bad)
            params = adam_step(adam, params, grads)
            epoch_losses.extend(loss for loss, _ in results)
            last_norm = grads.norm()
        adam.epoch += 1
        mean_loss = float(np.mean(epoch_losses))
        wall_ms = (time.perf_counter() - started) * 1000.0
        if log is not None:
            log.append(epoch, mean_loss, last_norm, wall_ms)
        if epoch % 10 == 0 or epoch == epochs - 1:
            logger.info(f"📉 [事前学習] epoch={epoch}, loss={mean_loss:.6f}, lr={adam.learning_rate:g}")

    logger.info("✅ [事前学習] 完了")
    return model.with_params(params)


def _pair_meta_gradient(model: Upsampler, params: ParameterSet, pair: TrainingPair,
                        cfg: MetaConfig) -> Tuple[float, ParameterSet]:
    inner_fn = inner_loss_fn(model, pair.x, cfg.sampling_method, cfg.seed)
    loss, grads, _ = meta_gradient(params, inner_fn, outer_loss_fn(model, pair), cfg.inner_steps,
                                   cfg.alpha, cfg.gradient_mode, cfg.clip_grad_norm)
    return loss, grads


def meta_train(model: Upsampler, data: Sequence[TrainingPair], cfg: MetaConfig,
               log: Optional[TrainingLog] = None) -> Upsampler:
    """
    メタ学習（事前学習済みの重みから開始する）

    各反復でB組をサンプリングし、組ごとに内側適応 → 外側損失の勾配を計算、
    バッチで合計（またはmean）して θ ← θ - β·g で更新する
    """
    cfg.validate()
    if model.ratio != cfg.ratio:
        raise ConfigurationError(f"model ratio {model.ratio} does not match meta config ratio {cfg.ratio}")
    _check_pairs(data, cfg.ratio)
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    logger.info(
        f"🧠 [メタ学習] 開始: pairs={len(data)}, iters={cfg.max_meta_iters}, B={cfg.batch_size}, "
        f"N={cfg.inner_steps}, α={cfg.alpha:g}, β={cfg.beta:g}, mode={cfg.gradient_mode}"
    )

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for iteration in range(cfg.max_meta_iters):
            started = time.perf_counter()
            batch = rng.choice(len(data), size=cfg.batch_size, replace=cfg.batch_size > len(data))

            def task(index: int, theta: ParameterSet = params) -> Tuple[float, ParameterSet]:
                return _pair_meta_gradient(model, theta, data[index], cfg)

            # 組ごとの内側適応は独立。集約は常にバッチ順
            results = list(executor.map(task, batch)) if executor else [task(i) for i in batch]
            for pair_index, (loss, grads) in zip(batch, results):
                bad = grads.first_nonfinite()
                if bad is None and not math.isfinite(loss):
                    bad = "<loss>"
                if bad is not None:
                    logger.error(f"❌ [メタ学習] 発散: iter={iteration}, pair={pair_index}, param={bad}")
                    raise DivergenceError(iteration, int(pair_index), bad)

            outer_grad = de.add_all([g for _, g in results])
            outer_loss = float(sum(loss for loss, _ in results))
            if cfg.batch_reduction == "mean":
                outer_grad = outer_grad.scale(1.0 / len(batch))
                outer_loss /= len(batch)
            outer_grad = clip_by_norm(outer_grad, cfg.clip_grad_norm)
            params = de.axpy(-cfg.beta, outer_grad, params)

            wall_ms = (time.perf_counter() - started) * 1000.0
            if log is not None:
                log.append(iteration, outer_loss, outer_grad.norm(), wall_ms)
            if iteration % max(cfg.log_interval, 1) == 0 or iteration == cfg.max_meta_iters - 1:
                logger.info(f"📉 [メタ学習] iter={iteration}, outer_loss={outer_loss:.6f}, "
                            f"grad_norm={outer_grad.norm():.4g}")
    finally:
        if executor is not None:
            executor.shutdown()

    logger.info("✅ [メタ学習] 完了")
    return model.with_params(params)


def meta_test(model: Upsampler, x: PointCloud, cfg: MetaConfig,
              inner_steps: Optional[int] = None) -> MetaTestResult:
    """
    テスト時適応してからアップサンプリングする

    inner_stepsを省略すると学習時と同じcfg.inner_stepsを使う。
    元のモデルは変更されない
    """
    steps = cfg.inner_steps if inner_steps is None else inner_steps
    return naive_tta(model, x, steps, cfg.alpha, cfg.sampling_method, cfg.clip_grad_norm)


def naive_tta(pretrained: Upsampler, x: PointCloud, steps: int, alpha: float,
              sampling_method: str = "fps", clip_grad_norm: Optional[float] = None) -> MetaTestResult:
    """
    メタ学習なしの事前学習済み重みに対する素朴なTTA（アブレーション用）

    適応と推論の時間を別々に記録する。meta_testはメタ学習済みの重みでこれを呼ぶ
    """
    started = time.perf_counter()
    adapted = inner_adapt(pretrained, x, steps, alpha, sampling_method, clip_grad_norm)
    adapted_at = time.perf_counter()
    y = predict(pretrained, x, adapted)
    finished = time.perf_counter()
    return MetaTestResult(
        y=y,
        adapted=adapted,
        adapt_ms=(adapted_at - started) * 1000.0,
        infer_ms=(finished - adapted_at) * 1000.0,
    )


def compare_gradient_modes(model: Upsampler, pair: TrainingPair, cfg: MetaConfig) -> float:
    """first_orderとfd_hvpの外側勾配のコサイン類似度"""
    first = _pair_meta_gradient(model, model.params, pair, replace(cfg, gradient_mode="first_order"))[1]
    exact = _pair_meta_gradient(model, model.params, pair, replace(cfg, gradient_mode="fd_hvp"))[1]
    return cosine_similarity(first, exact)
