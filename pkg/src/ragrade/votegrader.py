"""Majority-vote grading over retrieved neighbors.

The label is the mode of the neighbors' gold labels and the numeric score is
the mean of their gold scores. A tie on the mode resolves to the label of
the highest-relevance neighbor among the tied labels.
"""

from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence

from .errors import EmptyNeighborSet
from .retrieval import RetrievedExample


@dataclass
class VoteResult:
    label: str
    score: float
    support: Dict[str, int]
    neighbor_ids: List[str]


def vote_classify(neighbors: Sequence[RetrievedExample]) -> VoteResult:
    if not neighbors:
        raise EmptyNeighborSet("vote requires at least one neighbor")

    support = Counter(n.record.gold_label for n in neighbors)
    best_count = max(support.values())
    tied = {label for label, count in support.items() if count == best_count}
    if len(tied) == 1:
        label = tied.pop()
    else:
        # neighbors arrive in rank order; the first one carrying a tied label wins
        label = next(n.record.gold_label for n in neighbors if n.record.gold_label in tied)

    score = sum(n.record.gold_score for n in neighbors) / len(neighbors)
    return VoteResult(
        label=label,
        score=score,
        support=dict(support),
        neighbor_ids=[n.record.id for n in neighbors],
    )
