import numpy as np

from cddet.stream import Scenario, TaskSpec


def tiny_spec(task_id, direction, difficulty=5.0, n_train=24, dim=6):
    """Small hand-built task: fakes along one axis, reals near the origin."""
    mean = [0.0] * dim
    fake = [0.0] * dim
    fake[direction % dim] = difficulty
    fake2 = list(fake)
    fake2[(direction + 1) % dim] = 1.0
    shift = [0.0] * dim
    shift[-1] = 0.2
    return TaskSpec(
        task_id=task_id,
        name=f"tiny{task_id}",
        base_mean=tuple(mean),
        real_shift=tuple(shift),
        fake_means=(tuple(fake), tuple(fake2)),
        cov_scale=1.0,
        difficulty=difficulty,
        n_train=n_train,
        n_val=4,
        n_test=20,
    )


def tiny_scenario(n_tasks=2, seed=0, budget=40):
    tasks = [tiny_spec(t, direction=t - 1) for t in range(1, n_tasks + 1)]
    return Scenario(kind="easy", seed=seed, tasks=tasks, warmup=None, budget=budget)
