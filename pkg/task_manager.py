"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

評価スイープのセル（条件 × 形状 × シード）を管理・実行する
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

logger = logging.getLogger("mpu_tta.task_manager")


@dataclass
class SweepTask:
    """スイープの1セル"""
    id: str
    condition: str
    method: str
    shape_index: int
    seed: int
    run: Callable[[], Any] = field(repr=False)
    status: str = "pending"
    result: Any = None
    error: Optional[BaseException] = None
    wall_ms: float = 0.0


class TaskManager:
    """タスク管理クラス（セルは互いに独立、集約は投入順）"""

    def __init__(self, workers: int = 1):
        self.workers = max(1, workers)
        self.tasks: List[SweepTask] = []
        self.completed_tasks: List[SweepTask] = []
        self.failed_tasks: List[SweepTask] = []

    def add_tasks(self, tasks: List[SweepTask]):
        """
        タスクを追加する

        Args:
            tasks: 追加するタスクリスト
        """
        known = {task.id for task in self.tasks}
        for task in tasks:
            if task.id in known:
                raise ValueError(f"duplicate sweep task id '{task.id}'")
            known.add(task.id)
        self.tasks.extend(tasks)
        logger.info(f"📋 [タスク管理] {len(tasks)}個のタスクを追加")

    def _execute(self, task: SweepTask) -> SweepTask:
        task.status = "in_progress"
        started = time.perf_counter()
        try:
            task.result = task.run()
            task.status = "completed"
        except Exception as exc:
            task.error = exc
            task.status = "failed"
        task.wall_ms = (time.perf_counter() - started) * 1000.0
        return task

    def run_all(self) -> List[Any]:
        """
        待機中のタスクをすべて実行する

        Returns:
            投入順に並べた結果リスト

        Raises:
            投入順で最初に失敗したタスクの例外
        """
        pending = [task for task in self.tasks if task.status == "pending"]
        logger.info(f"🚀 [タスク管理] 実行開始: {len(pending)}セル, workers={self.workers}")
        if self.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                list(executor.map(self._execute, pending))
        else:
            for task in pending:
                self._execute(task)

        for task in pending:
            if task.status == "completed":
                self.completed_tasks.append(task)
            else:
                self.failed_tasks.append(task)
                logger.error(f"❌ [タスク管理] タスク失敗: {task.id} - {task.error}")
        failed = next((task for task in pending if task.status == "failed"), None)
        if failed is not None:
            raise failed.error
        logger.info(f"✅ [タスク管理] 実行完了: {len(pending)}セル")
        return [task.result for task in pending]
