# %% [markdown]
# # The toy sign corpus and the metric suite
#
# A weather-forecast grammar produces (gloss, sentence) pairs. Each gloss is
# rendered as a run of noisy feature frames, with a per-signer offset.
# Nothing here trains a model. Runs in a few seconds.

# %%
import numpy as np

from diffslt.data import detokenize, generate_corpus, make_pseudo_gloss
from diffslt.metrics import bleu_n, compression_ratio, diversity, homogenization, rouge_l

split = generate_corpus(seed=0, n_train=2000, n_dev=200, n_test=200)
print(len(split.train), len(split.dev), len(split.test), "samples")
print("sentence vocab", len(split.sentence_vocab), "| gloss vocab", len(split.gloss_vocab))

# %%
for s in split.train[:3]:
    print(" ".join(split.gloss_vocab.itos[g] for g in s.gloss))
    print("   ->", detokenize(s.sentence, split.sentence_vocab))
    print("   frames", s.frames.shape, "signer", s.signer_id)

# %% [markdown]
# Frame count is the sum of per-gloss durations, so segment boundaries are
# known exactly. Pseudo-glosses are true glosses with ~20% edit noise.

# %%
sample = split.train[0]
rng = np.random.default_rng(1)
noisy = make_pseudo_gloss(sample.gloss, 0.2, rng, split.gloss_vocab)
print("true  ", [split.gloss_vocab.itos[g] for g in sample.gloss])
print("pseudo", [split.gloss_vocab.itos[g] for g in noisy])

# %% [markdown]
# ## Metrics on hand-made outputs

# %%
ref = "tonight there will be heavy rain in the north".split()
for cand in ["tonight there will be heavy rain in the north",
             "tonight there will be rain in the south",
             "snow in the alps"]:
    c = cand.split()
    print(f"{cand:45s} bleu4={bleu_n(c, ref):.3f} rougeL={rouge_l(c, ref):.3f}")

# %%
sentences = [detokenize(s.sentence, split.sentence_vocab) for s in split.test]
print("test split  diversity", round(diversity(sentences), 4),
      "compression", round(compression_ratio(sentences), 3),
      "homogenization", round(homogenization(sentences, max_pairs=2000), 4))
print("one sentence x200 diversity", diversity([sentences[0]] * 200),
      "compression", round(compression_ratio([sentences[0]] * 200), 3))
