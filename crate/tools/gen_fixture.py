"""Writes the 500-post synthetic dump used by the end-to-end tests.

Usage: python3 gen_fixture.py ../crates/core/tests/fixtures
"""
import csv
import json
import os
import random
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "..", "crates", "core", "data")

FILLER = (
    "feel today really know tried friend week doctor night morning pain work "
    "sleep better worse withdrawal dose tolerance day time help month started "
    "stopped hour sick rest house family money job plan body mind sweat"
).split()
SUBREDDITS = ["opiates", "OpiatesRecovery", "heroin", "ChronicPain", "Drugs", "AskReddit"]

START_2017 = 1483228800
END_2018 = 1546300799


def terms(name):
    out = {}
    with open(os.path.join(DATA, f"lexicon_{name}.csv")) as f:
        for row in csv.DictReader(f):
            if row["term"].isalpha():
                out.setdefault(row["category"], []).append(row["term"])
    return out


def main(out_dir):
    rng = random.Random(20180101)
    sub, roa, tam = terms("substance"), terms("roa"), terms("tampering")
    # A few categories get most of the traffic so the tables are not all empty.
    sub_cats = ["Oxycodone", "Heroin", "Fentanyl", "Hydrocodone", "Buprenorphine"]
    roa_cats = ["Oral", "Intranasal", "Intravenous", "Smoking", "Sublingual"]
    tam_cats = ["Dissolve", "Grind", "Extract"]
    authors = [f"user{i:02d}" for i in range(40)]

    lines = []
    for n in range(500):
        sentences = []
        picked_sub = rng.choice(sub_cats) if rng.random() < 0.55 else None
        for _ in range(rng.randint(1, 5)):
            words = rng.sample(FILLER, rng.randint(3, 7))
            if picked_sub and rng.random() < 0.5:
                words.insert(rng.randrange(len(words) + 1), rng.choice(sub[picked_sub]))
            # Oxycodone leans oral, heroin leans intravenous.
            p_roa = 0.45 if picked_sub in ("Oxycodone", "Heroin") else 0.2
            if rng.random() < p_roa:
                if picked_sub == "Oxycodone" and rng.random() < 0.6:
                    cat = "Oral"
                elif picked_sub == "Heroin" and rng.random() < 0.6:
                    cat = "Intravenous"
                else:
                    cat = rng.choice(roa_cats)
                words.insert(rng.randrange(len(words) + 1), rng.choice(roa[cat]))
            if rng.random() < 0.1:
                words.insert(rng.randrange(len(words) + 1), rng.choice(tam[rng.choice(tam_cats)]))
            sentences.append(" ".join(words).capitalize() + rng.choice([".", "!", "?"]))
        text = " ".join(sentences)
        author = "[deleted]" if rng.random() < 0.04 else rng.choice(authors)
        record = {
            "id": f"f{n:04d}",
            "author": author,
            "subreddit": rng.choice(SUBREDDITS),
            "created_utc": rng.randint(START_2017, END_2018),
        }
        if rng.random() < 0.25:
            record["title"] = sentences[0]
            record["selftext"] = " ".join(sentences[1:])
        else:
            record["body"] = text
        lines.append(json.dumps(record, sort_keys=True))
    # Two malformed lines exercise the skip counter.
    lines.insert(100, '{"id": "broken", "author": "x"')
    lines.insert(300, '{"id": "nobody", "subreddit": "opiates", "created_utc": 1500000000}')

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "dump_500.ndjson"), "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
