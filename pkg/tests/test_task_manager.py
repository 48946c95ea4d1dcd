"""
TaskManager（スイープセルの実行）のテスト
"""

import threading
import time

import pytest

from task_manager import SweepTask, TaskManager


def _task(index: int, run) -> SweepTask:
    return SweepTask(id=f"cell-{index}", condition="0", method="frozen", shape_index=index, seed=0, run=run)


def _delayed(value: int, delay: float):
    def run():
        time.sleep(delay)
        return value
    return run


@pytest.mark.parametrize("workers", [1, 3])
def test_results_follow_submission_order(workers):
    manager = TaskManager(workers=workers)
    # 後のタスクほど早く終わる
    manager.add_tasks([_task(i, _delayed(i, 0.02 * (4 - i))) for i in range(4)])
    assert manager.run_all() == [0, 1, 2, 3]
    assert len(manager.completed_tasks) == 4 and not manager.failed_tasks
    assert all(task.status == "completed" and task.wall_ms >= 0.0 for task in manager.tasks)


def test_parallel_workers_share_the_pool():
    seen = set()
    lock = threading.Lock()

    def run():
        with lock:
            seen.add(threading.get_ident())
        time.sleep(0.05)

    manager = TaskManager(workers=2)
    manager.add_tasks([_task(i, run) for i in range(4)])
    manager.run_all()
    assert 1 <= len(seen) <= 2


def test_first_failure_in_order_is_raised():
    def boom(message):
        def run():
            raise RuntimeError(message)
        return run

    manager = TaskManager(workers=2)
    manager.add_tasks([_task(0, _delayed(0, 0.0)), _task(1, boom("first")), _task(2, boom("second"))])
    with pytest.raises(RuntimeError, match="first"):
        manager.run_all()
    assert [task.status for task in manager.tasks] == ["completed", "failed", "failed"]
    assert [task.id for task in manager.failed_tasks] == ["cell-1", "cell-2"]


def test_duplicate_ids_are_rejected():
    manager = TaskManager()
    manager.add_tasks([_task(0, _delayed(0, 0.0))])
    with pytest.raises(ValueError):
        manager.add_tasks([_task(0, _delayed(1, 0.0))])
    assert len(manager.tasks) == 1


def test_run_all_only_runs_pending_tasks():
    calls = []
    manager = TaskManager()
    manager.add_tasks([_task(0, lambda: calls.append(0) or 0)])
    assert manager.run_all() == [0]
    manager.add_tasks([_task(1, lambda: calls.append(1) or 1)])
    assert manager.run_all() == [1]
    assert calls == [0, 1]
