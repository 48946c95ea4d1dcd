"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

評価ハーネス（ノイズ・倍率・内側ステップ数・構成要素・ドメインシフトのアブレーション）
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.run_config import RunConfig, check_points_for_ratio, resolve_workers
from meta_learner import (
    MAX_INNER_STEPS, AdamState, MetaConfig, TrainingPair, compare_gradient_modes, meta_test, meta_train,
    naive_tta, pretrain,
)
from models.reports import MetricReport, SweepReport, SweepRow
from nn_metrics import evaluate
from point_cloud import PointCloud, add_gaussian_noise, generate_shape, random_shape_spec
from pu_exceptions import ConfigurationError, ParameterError
from sampling import downsample
from task_manager import SweepTask, TaskManager
from upsampler import VALID_RATIOS, Upsampler, predict

logger = logging.getLogger("mpu_tta.runner")

METHODS = ("frozen", "naive-tta", "meta-tta")
ABLATIONS = ("noise", "ratio", "inner-steps", "components", "domain-shift", "gradient-mode")

DEFAULT_NOISE_LEVELS = (0.0, 0.005, 0.01, 0.02)
DEFAULT_RATIOS = (4, 8, 16)
DEFAULT_INNER_STEPS = (1, 3, 5, 7, 9)

# 形状シードの空間（シードごとに学習用とテスト用を分ける）
SEED_STRIDE = 10_000
TEST_SEED_OFFSET = 5_000

IN_DISTRIBUTION = "in-distribution"
SHIFTED = "shifted"


@dataclass(frozen=True)
class EvalCase:
    """評価用の (疎な入力, 密な正解) 組"""
    label: str
    shape_index: int
    seed: int
    x: PointCloud
    y: PointCloud


@dataclass(frozen=True)
class TrainedModels:
    pretrained: Upsampler
    meta: Upsampler


@dataclass(frozen=True)
class CellResult:
    condition: str
    method: str
    shape_index: int
    seed: int
    report: MetricReport
    adapt_ms: float
    infer_ms: float


# ---------------------------------------------------------------------------
# データセット
# ---------------------------------------------------------------------------

def _make_pair(family: str, shape_seed: int, ratio: int, points: int, sampling_method: str) -> Tuple[PointCloud, PointCloud]:
    y = generate_shape(random_shape_spec(family, shape_seed), ratio * points)
    x = downsample(y, ratio, method=sampling_method, seed=shape_seed)
    return x, y


def build_training_pairs(cfg: RunConfig, ratio: int, seed: int) -> List[TrainingPair]:
    """
    学習用の (X_n, Y_n) 組を生成する

    Y_nはファミリーを巡回してrN点で生成し、X_nはそのFPS間引き（ノイズはcfg.noise_level）
    """
    pairs = []
    for i in range(cfg.train_shapes):
        family = cfg.train_families[i % len(cfg.train_families)]
        shape_seed = seed * SEED_STRIDE + i
        x, y = _make_pair(family, shape_seed, ratio, cfg.points_per_shape, cfg.sampling_method)
        if cfg.noise_level > 0.0:
            x = add_gaussian_noise(x, cfg.noise_level, shape_seed)
        pairs.append(TrainingPair(x=x, y=y))
    return pairs


def build_test_cases(cfg: RunConfig, families: Sequence[str], ratio: int, seed: int,
                     noise_level: Optional[float] = None) -> List[EvalCase]:
    """評価用の組を生成する（学習用とは別のシード空間）"""
    level = cfg.noise_level if noise_level is None else noise_level
    cases = []
    for i in range(cfg.test_shapes):
        family = families[i % len(families)]
        shape_seed = seed * SEED_STRIDE + TEST_SEED_OFFSET + i
        x, y = _make_pair(family, shape_seed, ratio, cfg.points_per_shape, cfg.sampling_method)
        if level > 0.0:
            x = add_gaussian_noise(x, level, shape_seed)
        cases.append(EvalCase(label=family, shape_index=i, seed=seed, x=x, y=y))
    return cases


# ---------------------------------------------------------------------------
# 学習と評価
# ---------------------------------------------------------------------------

def train_models(cfg: RunConfig, ratio: int, inner_steps: int, seed: int,
                 gradient_mode: Optional[str] = None) -> TrainedModels:
    """
    事前学習 → メタ学習を1シード分行う

    Args:
        cfg: 実験設定
        ratio: アップサンプリング倍率
        inner_steps: メタ学習の内側ステップ数
        seed: 初期化・データ・バッチ選択のシード

    Returns:
        事前学習済みモデルとメタ学習済みモデル
    """
    data = build_training_pairs(cfg, ratio, seed)
    model = Upsampler.init(cfg.backbone_config(seed=seed, ratio=ratio))
    adam = AdamState.for_params(model.params, base_lr=cfg.pretrain_lr, decay=cfg.lr_decay)
    pretrained = pretrain(model, data, cfg.pretrain_epochs, adam, batch_size=cfg.pretrain_batch_size, seed=seed)
    overrides = dict(ratio=ratio, inner_steps=inner_steps, seed=seed, workers=1)
    if gradient_mode is not None:
        overrides["gradient_mode"] = gradient_mode
    meta = meta_train(pretrained, data, cfg.meta_config(**overrides))
    return TrainedModels(pretrained=pretrained, meta=meta)


def evaluate_method(method: str, models: TrainedModels, case: EvalCase, mcfg: MetaConfig,
                    inner_steps: int) -> Tuple[MetricReport, float, float]:
    """1組を指定の手法でアップサンプリングし (指標, 適応ms, 推論ms) を返す"""
    if method == "frozen":
        started = time.perf_counter()
        y = predict(models.pretrained, case.x)
        return evaluate(y, case.y), 0.0, (time.perf_counter() - started) * 1000.0
    if method == "naive-tta":
        result = naive_tta(models.pretrained, case.x, inner_steps, mcfg.alpha, mcfg.sampling_method,
                           mcfg.clip_grad_norm)
        return evaluate(result.y, case.y), result.adapt_ms, result.infer_ms
    if method == "meta-tta":
        result = meta_test(models.meta, case.x, mcfg, inner_steps=inner_steps)
        return evaluate(result.y, case.y), result.adapt_ms, result.infer_ms
    raise ParameterError(f"method must be one of {METHODS}, got '{method}'")


def aggregate(ablation: str, cells: Sequence[CellResult], cd_scale: float) -> List[SweepRow]:
    """
    (条件, 手法) ごとに平均と標準偏差をまとめる

    行の順序はセルの投入順。CDはcd_scale倍（既定×10²）
    """
    frame = pd.DataFrame.from_records([
        {
            "condition": cell.condition, "method": cell.method,
            "shape": cell.shape_index, "seed": cell.seed,
            "cd_sum": cell.report.cd_sum, "cd_mean": cell.report.cd_mean,
            "psnr": cell.report.psnr_db, "adapt_ms": cell.adapt_ms, "infer_ms": cell.infer_ms,
        }
        for cell in cells
    ])
    rows = []
    for (condition, method), group in frame.groupby(["condition", "method"], sort=False):
        rows.append(SweepRow(
            ablation=ablation,
            condition=condition,
            method=method,
            cd_sum_e2=float(group["cd_sum"].mean()) * cd_scale,
            cd_sum_std_e2=float(np.std(group["cd_sum"].to_numpy())) * cd_scale,
            cd_mean_e2=float(group["cd_mean"].mean()) * cd_scale,
            cd_mean_std_e2=float(np.std(group["cd_mean"].to_numpy())) * cd_scale,
            psnr_db=float(group["psnr"].mean()),
            psnr_std_db=float(np.std(group["psnr"].to_numpy())),
            adapt_ms=float(group["adapt_ms"].mean()),
            infer_ms=float(group["infer_ms"].mean()),
            shape_count=int(group["shape"].nunique()),
            seed_count=int(group["seed"].nunique()),
        ))
    return rows


class ExperimentRunner:
    """
    アブレーションを実行するハーネス

    学習済みモデルは (ratio, inner_steps, seed, gradient_mode) 単位でキャッシュし、
    評価セルはTaskManagerで並列実行する
    """

    def __init__(self, cfg: RunConfig, workers: Optional[int] = None):
        self.cfg = cfg
        self.workers = resolve_workers(cfg) if workers is None else max(1, workers)
        self._models: Dict[Tuple[int, int, int, str], TrainedModels] = {}

    def _check_ratio(self, ratio: int) -> None:
        if ratio not in VALID_RATIOS:
            raise ConfigurationError(f"ratio must be one of {list(VALID_RATIOS)}, got {ratio}", key="ratio")
        check_points_for_ratio(self.cfg.points_per_shape, ratio)

    def models_for(self, keys: Sequence[Tuple[int, int, int, str]]) -> Dict[Tuple[int, int, int, str], TrainedModels]:
        """未学習のキーだけを学習する（シードごとの学習は独立）"""
        missing = [key for key in dict.fromkeys(keys) if key not in self._models]
        if missing:
            manager = TaskManager(self.workers)
            manager.add_tasks([
                SweepTask(
                    id=f"train:r{ratio}:n{steps}:s{seed}:{mode}",
                    condition=f"r={ratio},N={steps}",
                    method=mode,
                    shape_index=-1,
                    seed=seed,
                    run=lambda ratio=ratio, steps=steps, seed=seed, mode=mode: train_models(
                        self.cfg, ratio, steps, seed, mode),
                )
                for ratio, steps, seed, mode in missing
            ])
            for key, models in zip(missing, manager.run_all()):
                self._models[key] = models
        return {key: self._models[key] for key in keys}

    def _run_cells(self, ablation: str, plan: List[Tuple[str, str, TrainedModels, EvalCase, MetaConfig, int]]) -> SweepReport:
        manager = TaskManager(self.workers)
        manager.add_tasks([
            SweepTask(
                id=f"{condition}:{method}:{case.seed}:{case.shape_index}",
                condition=condition,
                method=method,
                shape_index=case.shape_index,
                seed=case.seed,
                run=lambda method=method, models=models, case=case, mcfg=mcfg, steps=steps: evaluate_method(
                    method, models, case, mcfg, steps),
            )
            for condition, method, models, case, mcfg, steps in plan
        ])
        results = manager.run_all()
        cells = [
            CellResult(condition, method, case.shape_index, case.seed, report, adapt_ms, infer_ms)
            for (condition, method, _, case, _, _), (report, adapt_ms, infer_ms) in zip(plan, results)
        ]
        report = SweepReport(ablation=ablation, rows=aggregate(ablation, cells, self.cfg.cd_scale),
                             config_digest=self.cfg.digest())
        logger.info(f"📊 [評価] {ablation}: {len(report.rows)}行, {len(cells)}セル")
        return report

    def _meta_config(self, ratio: int, inner_steps: int, seed: int) -> MetaConfig:
        return self.cfg.meta_config(ratio=ratio, inner_steps=inner_steps, seed=seed, workers=1)

    def run_noise_ablation(self, levels: Optional[Sequence[float]] = None,
                           methods: Sequence[str] = METHODS) -> SweepReport:
        """ノイズレベルごとの頑健性（学習はcfg.noise_levelのデータ、テスト入力にノイズを加える）"""
        levels = list(DEFAULT_NOISE_LEVELS if levels is None else levels)
        for level in levels:
            if not 0.0 <= level <= 0.1:
                raise ConfigurationError(f"noise level must be in [0, 0.1], got {level}", key="levels")
        cfg = self.cfg
        keys = [(cfg.ratio, cfg.inner_steps, seed, cfg.gradient_mode) for seed in cfg.seeds]
        models = self.models_for(keys)
        plan = []
        for level in levels:
            for seed, key in zip(cfg.seeds, keys):
                mcfg = self._meta_config(cfg.ratio, cfg.inner_steps, seed)
                for case in build_test_cases(cfg, cfg.test_families, cfg.ratio, seed, noise_level=level):
                    plan.extend((f"{level:g}", method, models[key], case, mcfg, cfg.inner_steps) for method in methods)
        return self._run_cells("noise", plan)

    def run_ratio_ablation(self, ratios: Optional[Sequence[int]] = None,
                           methods: Sequence[str] = METHODS) -> SweepReport:
        """倍率ごとの性能（倍率ごとに学習し直す）"""
        ratios = [int(r) for r in (DEFAULT_RATIOS if ratios is None else ratios)]
        for ratio in ratios:
            self._check_ratio(ratio)
        cfg = self.cfg
        keys = [(ratio, cfg.inner_steps, seed, cfg.gradient_mode) for ratio in ratios for seed in cfg.seeds]
        models = self.models_for(keys)
        plan = []
        for ratio in ratios:
            for seed in cfg.seeds:
                key = (ratio, cfg.inner_steps, seed, cfg.gradient_mode)
                mcfg = self._meta_config(ratio, cfg.inner_steps, seed)
                for case in build_test_cases(cfg, cfg.test_families, ratio, seed):
                    plan.extend((str(ratio), method, models[key], case, mcfg, cfg.inner_steps) for method in methods)
        return self._run_cells("ratio", plan)

    def run_inner_steps_ablation(self, steps_grid: Optional[Sequence[int]] = None,
                                 methods: Sequence[str] = ("meta-tta",)) -> SweepReport:
        """内側ステップ数と処理時間（学習とテストで同じNを使う）"""
        steps_grid = [int(n) for n in (DEFAULT_INNER_STEPS if steps_grid is None else steps_grid)]
        for steps in steps_grid:
            if not 0 <= steps <= MAX_INNER_STEPS:
                raise ConfigurationError(f"inner steps must be in [0, {MAX_INNER_STEPS}], got {steps}", key="values")
        cfg = self.cfg
        keys = [(cfg.ratio, steps, seed, cfg.gradient_mode) for steps in steps_grid for seed in cfg.seeds]
        models = self.models_for(keys)
        plan = []
        for steps in steps_grid:
            for seed in cfg.seeds:
                key = (cfg.ratio, steps, seed, cfg.gradient_mode)
                mcfg = self._meta_config(cfg.ratio, steps, seed)
                for case in build_test_cases(cfg, cfg.test_families, cfg.ratio, seed):
                    plan.extend((str(steps), method, models[key], case, mcfg, steps) for method in methods)
        return self._run_cells("inner-steps", plan)

    def _shifted_plan(self, condition: str, families: Sequence[str], methods: Sequence[str]) -> list:
        cfg = self.cfg
        keys = [(cfg.ratio, cfg.inner_steps, seed, cfg.gradient_mode) for seed in cfg.seeds]
        models = self.models_for(keys)
        plan = []
        for seed, key in zip(cfg.seeds, keys):
            mcfg = self._meta_config(cfg.ratio, cfg.inner_steps, seed)
            for case in build_test_cases(cfg, families, cfg.ratio, seed):
                plan.extend((condition, method, models[key], case, mcfg, cfg.inner_steps) for method in methods)
        return plan

    def run_component_ablation(self) -> SweepReport:
        """フレームワーク構成要素（frozen / naive-tta / meta-tta）の比較"""
        return self._run_cells("components", self._shifted_plan(SHIFTED, self.cfg.test_families, METHODS))

    def run_domain_shift_experiment(self) -> SweepReport:
        """
        学習ファミリーで学習し、別ファミリーで評価する

        学習ファミリー上のfrozenを分布内の対照行として常に含める
        """
        cfg = self.cfg
        overlap = sorted(set(cfg.train_families) & set(cfg.test_families))
        if overlap:
            raise ConfigurationError(
                f"train and test shape families overlap: {overlap}", key="test_families"
            )
        plan = self._shifted_plan(IN_DISTRIBUTION, cfg.train_families, ("frozen",))
        plan += self._shifted_plan(SHIFTED, cfg.test_families, METHODS)
        return self._run_cells("domain-shift", plan)

    def run_gradient_mode_ablation(self) -> SweepReport:
        """
        first_orderとfd_hvpのメタ勾配を比較する

        各モードでメタ学習したモデルのmeta-tta行に加え、
        学習用の組ごとの外側勾配のコサイン類似度をextrasに記録する
        """
        cfg = self.cfg
        plan = []
        similarities = []
        for mode in ("first_order", "fd_hvp"):
            keys = [(cfg.ratio, cfg.inner_steps, seed, mode) for seed in cfg.seeds]
            models = self.models_for(keys)
            for seed, key in zip(cfg.seeds, keys):
                mcfg = self._meta_config(cfg.ratio, cfg.inner_steps, seed)
                for case in build_test_cases(cfg, cfg.test_families, cfg.ratio, seed):
                    plan.append((mode, "meta-tta", models[key], case, mcfg, cfg.inner_steps))
        for seed in cfg.seeds:
            pretrained = self.models_for([(cfg.ratio, cfg.inner_steps, seed, "first_order")])
            model = next(iter(pretrained.values())).pretrained
            mcfg = self._meta_config(cfg.ratio, cfg.inner_steps, seed)
            for pair in build_training_pairs(cfg, cfg.ratio, seed):
                similarities.append(compare_gradient_modes(model, pair, mcfg))
        report = self._run_cells("gradient-mode", plan)
        report.extras["cosine_mean"] = float(np.mean(similarities))
        report.extras["cosine_min"] = float(np.min(similarities))
        logger.info(f"🔍 [評価] 勾配モードのコサイン類似度: mean={report.extras['cosine_mean']:.4f}, "
                    f"min={report.extras['cosine_min']:.4f}")
        return report

    def run(self, ablation: str, values: Optional[Sequence[float]] = None) -> SweepReport:
        """アブレーション名で振り分ける"""
        if ablation == "noise":
            return self.run_noise_ablation(values)
        if ablation == "ratio":
            return self.run_ratio_ablation(None if values is None else [int(v) for v in values])
        if ablation == "inner-steps":
            return self.run_inner_steps_ablation(None if values is None else [int(v) for v in values])
        if ablation == "components":
            return self.run_component_ablation()
        if ablation == "domain-shift":
            return self.run_domain_shift_experiment()
        if ablation == "gradient-mode":
            return self.run_gradient_mode_ablation()
        raise ConfigurationError(f"ablation must be one of {list(ABLATIONS)}, got '{ablation}'", key="ablation")


def run_domain_shift_experiment(cfg: RunConfig) -> SweepReport:
    return ExperimentRunner(cfg).run_domain_shift_experiment()
