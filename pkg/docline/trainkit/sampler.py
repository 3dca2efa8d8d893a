import typing as t

import numpy as np

from docline.errors import CorpusError


class BatchSampler:
    """Sequential passes over the corpus, each in its own shuffled order.

    The order of pass `p` is drawn from a generator seeded by `(seed, p)`, so the
    batch of any step is known without replaying earlier steps.
    """

    def __init__(self, corpus_size: int, batch_size: int, seed: int) -> None:
        if corpus_size < 1:
            raise CorpusError("cannot sample batches from an empty corpus")
        self.corpus_size = corpus_size
        self.batch_size = batch_size
        self.seed = seed
        self._orders: dict[int, np.ndarray] = {}

    def pass_order(self, pass_index: int) -> np.ndarray:
        order = self._orders.get(pass_index)
        if order is None:
            rng = np.random.default_rng([self.seed, pass_index])
            order = rng.permutation(self.corpus_size)
            self._orders = {pass_index: order}
        return order

    def batch_indices(self, step: int) -> list[int]:
        indices = []
        for slot in range(self.batch_size):
            position = step * self.batch_size + slot
            pass_index, offset = divmod(position, self.corpus_size)
            indices.append(int(self.pass_order(pass_index)[offset]))
        return indices

    def plan_seed(self, step: int, slot: int) -> t.Sequence[int]:
        return [self.seed, step, slot]
