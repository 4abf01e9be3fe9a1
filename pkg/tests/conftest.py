import numpy as np
import pytest
import torch

from icod.datagen import BiasConfig, TaskDef, build_dataset, default_signatures


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def task4():
    return TaskDef("t4", (0, 1, 2, 3))


@pytest.fixture
def bias4():
    return BiasConfig(0.95, signatures=default_signatures((0, 1, 2, 3)))


def make_micro_dataset(n=40, rho=1.0, n_classes=4, seed=7, contrast=None, **kwargs):
    classes = tuple(range(n_classes))
    task = TaskDef("micro", classes, **kwargs)
    sig_kwargs = {} if contrast is None else {"contrast": contrast}
    bias = BiasConfig(rho, signatures=default_signatures(classes, **sig_kwargs))
    return build_dataset(task, bias, n, seed)
