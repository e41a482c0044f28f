import numpy as np

from fedlap.graph import build_graph


def triangle(labels=None):
    return build_graph([(0, 1), (1, 2), (0, 2)], np.ones((3, 1)), labels)


def path_graph(n: int, d: int = 1):
    return build_graph([(i, i + 1) for i in range(n - 1)], np.ones((n, d)))
