# Regenerates data/lemmas.txt from the lemminflect lookup table plus identity
# entries for every shipped lexicon term. Run: python3 tools/gen_lemmas.py crates/core/data
import csv, gzip, os, re, sys
from collections import defaultdict

import lemminflect
import lexicon_source

WORD = re.compile(r"^[a-z]+$")
res = os.path.join(os.path.dirname(lemminflect.__file__), "resources", "lemma_lu.csv.gz")

by_form = defaultdict(dict)
with gzip.open(res, "rt") as f:
    for line in f:
        form, pos, lemmas = line.rstrip("\n").split(",", 2)
        if not WORD.match(form):
            continue
        lemma = lemmas.split("/")[0].lower()
        if WORD.match(lemma):
            by_form[form][pos] = lemma


def choose(form, by_pos):
    order = ["noun", "verb", "adj", "adv", "aux"]
    if form.endswith("ing") or form.endswith("ed"):
        order = ["verb", "noun", "adj", "adv", "aux"]
    for pos in order:
        lemma = by_pos.get(pos)
        if lemma is not None and lemma != form:
            return lemma
    return form


table = {form: choose(form, pos) for form, pos in by_form.items()}

# Resolve chains so that every value is a fixed point.
def resolve(w):
    seen = set()
    while table.get(w, w) != w and w not in seen:
        seen.add(w)
        w = table[w]
    return w

table = {k: resolve(v) for k, v in table.items()}
for v in list(table.values()):
    table.setdefault(v, v)

for row in lexicon_source.rows():
    term = row[3]
    table[term] = term

with open(os.path.join(sys.argv[1], "lemmas.txt"), "w") as f:
    f.write("# opilex-lemmas v1\n")
    for k in sorted(table):
        f.write(f"{k} {table[k]}\n")
changed = sum(1 for k, v in table.items() if k != v)
print(len(table), "entries,", changed, "non-identity")
