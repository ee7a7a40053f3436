# # A small end-to-end experiment
#
# Runs the smoke recipe: a 200-example world, a small teacher, and one
# student per algorithm family. It writes the same artifacts as the CLI
# (worlds/, checkpoints/, runs/, reports/) under out/smoke and takes a few
# minutes on one core.

import sys

from kidlab import cli, recipes

out = sys.argv[1] if len(sys.argv) > 1 else "out/smoke"
spec = recipes.smoke_spec(out)
recipes.run_recipe(spec, gate=False)
print(cli.cmd_report(spec.output_dir, force=True))

# The same steps from a shell:
#
#   python -m kidlab.cli gen-world --spec spec.json
#   python -m kidlab.cli train-teacher --spec spec.json
#   python -m kidlab.cli distill --spec spec.json --run kid-s11
#   python -m kidlab.cli evaluate --spec spec.json --run kid-s11
#   python -m kidlab.cli report --spec spec.json
