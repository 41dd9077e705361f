"""
Knowledge categories, controlled mixtures and recovery
======================================================

A lookup table stands in for the language model so that the few-shot
probe, the mixture builder and the recovery rate can be followed by hand.
"""

# %%
from morfi.knowledge import (
    LookupSampler,
    MixtureSpec,
    QARecord,
    annotate,
    build_mixture,
    knowledge_recovery,
    render_prompt,
)

records = [QARecord(f"q{i}", f"Which city is landmark {i} in?", f"City {i}", "located_in") for i in range(12)]
print(render_prompt(records[1:3], records[0]))

# %%
# Greedy answers: right for the first four questions, right in 3 of 10
# exemplar sets for the next two. Sampled answers give two more questions
# an occasional hit.
q = [r.question for r in records]
greedy = {q[i]: records[i].answer for i in range(4)}
greedy.update({q[i]: [records[i].answer] * 3 + ["?"] * 7 for i in (4, 5)})
sampled = {q[i]: [records[i].answer] + ["?"] * 15 for i in (6, 7)}
sampler = LookupSampler(greedy, sampled)
annotated = [(r, annotate(r, sampler, records)) for r in records]
for r, a in annotated:
    print(f"{r.id:>3}  greedy={a.p_greedy:.1f} sampled={a.p_sampled:.4f}  {a.category.value}")

# %%
# Build an 8-item training set with exactly 50% Unknown facts.
known = [r for r, a in annotated if a.label == "Known"]
unknown = [r for r, a in annotated if a.label == "Unknown"]
mix = build_mixture(known, unknown, MixtureSpec(p=50, size=8, seed=1))
print([r.id for r in mix])

# %%
# Recovery: of the facts the steered model gains over its unsteered self,
# how many were known to the model fine-tuned only on known facts?
d0 = [1, 0, 1, 1, 0, 1]
d100 = [0, 0, 0, 1, 0, 0]
d100s = [1, 1, 0, 1, 0, 1]
print(knowledge_recovery(d0, d100, d100s))
