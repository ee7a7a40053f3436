# # The toy text-to-SQL world
#
# Every experiment in this repo runs on a synthetic world: small random
# schemas, random table contents, and template questions paired with a gold
# query in a closed SQL subset. This script walks through one world.

import numpy as np

from kidlab import toysql
from kidlab.tokenizer import VOCAB

world = toysql.generate_world(seed=7, n_train=200, n_eval=40)
print(len(world.schemas), "schemas,", len(world.train), "train /", len(world.eval), "eval")

# ## One example

ex = world.train[0]
print("prompt :", ex.prompt)
print("gold   :", ex.gold_sql)

# Databases are never stored. They regenerate from (schema, db_seed).
db = world.database(ex)
for name, rows in db.rows.items():
    print(name, rows[:3], "...", len(rows), "rows")

print("result :", toysql.execute(ex.gold, db).rows)

# ## Tokens
#
# Word-level ids over a closed vocabulary; outputs end in EOS.

ids = VOCAB.encode(ex.gold_sql)
print(len(VOCAB), "tokens in the vocabulary")
print(ids, "->", VOCAB.decode(ids))

# ## Test-suite databases
#
# Variant j > 0 of an example's database keeps the schema and redraws the
# rows. Take a query with ORDER BY ... LIMIT and drop the ORDER BY: the
# shortcut can match the gold by luck on one database, rarely on all eight.

ex = next(e for e in world.train if e.gold.order_by is not None and e.gold.limit is not None)
q = ex.gold
shortcut = toysql.Query(q.select, q.from_table, q.join, q.where, None, q.limit)
print(toysql.render_sql(q), "  vs  ", toysql.render_sql(shortcut))
agree = [toysql.execute(q, world.database(ex, j)).matches(toysql.execute(shortcut, world.database(ex, j)))
         for j in range(8)]
print("the shortcut agrees on", int(np.sum(agree)), "of 8 databases")
