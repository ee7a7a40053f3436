# # Building imperfect targets
#
# KID trains on gold outputs where a fraction alpha of the tokens has been
# replaced by the student's own guesses. One teacher-forced pass over the
# masked sequence produces every guess at once.

from kidlab import imperfect, toysql
from kidlab.distill import DistillConfig, Seeds, train
from kidlab.model import ModelConfig, count_forwards
from kidlab.tokenizer import VOCAB

world = toysql.generate_world(seed=3, n_train=200, n_eval=20)

# A briefly trained student makes plausible but imperfect guesses.
student = train(world, ModelConfig.student(), DistillConfig("SFT", steps=300, seeds=Seeds(0, 0, 0))).params

ex = world.train[5]
for strategy in imperfect.MaskStrategy:
    with count_forwards() as c:
        s = imperfect.make_imperfect(strategy, student, ex, seed=1, alpha=0.3)
    print(f"{strategy.value:8s} passes={c.passes} masked={s.masked_positions}")
    print("   gold     :", VOCAB.decode(s.gold))
    print("   rewritten:", VOCAB.decode(s.rewritten))

# Masking-only keeps the MASK tokens and skips the fill pass entirely.
s = imperfect.make_imperfect("random", student, ex, seed=1, alpha=0.3, rewrite=False)
print("mask-only:", VOCAB.decode(s.rewritten))
