"""
Scoring posts and queries
=========================

A creator's authority is the log of their audience plus any extra signals.
A post's trending score adds weighted engagement on top of that, and a
query's score sums over every post that supports it.
"""

from rttp.domain import Creator
from rttp.scoring import EngagementWeights, aggregate_candidate_score, creator_authority, trending_score

###############################################################################
# Two creators: a large verified account and a small one.
big = Creator("c-big", follower_count=250_000, authority_signals=(("meta_verified", 2.0),))
small = Creator("c-small", follower_count=40)
for c in (big, small):
    print(f"{c.creator_id:8s} authority = {creator_authority(c):.3f}")

###############################################################################
# Default weights put comments above reshares, reactions and clicks.
w = EngagementWeights()
print(w)

###############################################################################
# The small creator's post draws a lot of discussion, the big one's is skimmed.
counts_small = {"comment": 40, "reaction": 25}
counts_big = {"reaction": 10, "click": 30}
s_small = trending_score(creator_authority(small), counts_small, w)
s_big = trending_score(creator_authority(big), counts_big, w)
print(f"small creator post: {s_small:.2f}")
print(f"big creator post:   {s_big:.2f}")

###############################################################################
# A query backed by both posts gets the sum.
print(f"query score: {aggregate_candidate_score([s_small, s_big]):.2f}")
