"""Regenerates the caption and triplet fixtures.

Every caption comes from a small grammar, so its expected triplets are known
by construction. Run from this directory: python3 make_fixtures.py
"""

import json
import random

# lemma, 3sg, progressive, past
VERBS = [
    ("ride", "rides", "riding", "rode"),
    ("hold", "holds", "holding", "held"),
    ("carry", "carries", "carrying", "carried"),
    ("kick", "kicks", "kicking", "kicked"),
    ("throw", "throws", "throwing", "threw"),
    ("eat", "eats", "eating", "ate"),
    ("push", "pushes", "pushing", "pushed"),
    ("watch", "watches", "watching", "watched"),
    ("fly", "flies", "flying", "flew"),
    ("read", "reads", "reading", "read"),
    ("wash", "washes", "washing", "washed"),
    ("feed", "feeds", "feeding", "fed"),
    ("pull", "pulls", "pulling", "pulled"),
    ("catch", "catches", "catching", "caught"),
    ("cut", "cuts", "cutting", "cut"),
    ("hug", "hugs", "hugging", "hugged"),
]
PARTICLE_VERBS = [
    ("sit on", "sits on", "sitting on", "sat on"),
    ("look at", "looks at", "looking at", "looked at"),
    ("play with", "plays with", "playing with", "played with"),
    ("lean on", "leans on", "leaning on", "leaned on"),
]
PERSONS = ["man", "woman", "boy", "girl", "person", "player", "child", "skier", "chef", "worker"]
PLURAL_PERSONS = ["men", "women", "boys", "girls", "people", "children", "players", "kids"]
NON_PERSONS = ["dog", "cat", "car", "horse", "bird", "train", "truck", "robot"]
OBJECTS = ["horse", "bike", "ball", "kite", "book", "cup", "umbrella", "bench", "frisbee", "pizza",
           "sandwich", "phone", "guitar", "boat", "chair", "bottle", "laptop", "bag", "hat", "sheep"]
ADJECTIVES = ["red", "small", "wooden", "old", "large", "blue", "white", "green"]
PLACES = ["road", "beach", "street", "grass", "field", "kitchen", "park", "snow"]
DETS = ["a", "the"]


def np(rng, noun, det=None, adj_prob=0.4):
    det = det or rng.choice(DETS)
    if rng.random() < adj_prob:
        return f"{det} {rng.choice(ADJECTIVES)} {noun}"
    return f"{det} {noun}"


def object_np(rng, obj):
    return np(rng, obj, det=rng.choice(["a", "the", "his", "her"]))


def pick_verb(rng):
    return rng.choice(VERBS if rng.random() < 0.8 else PARTICLE_VERBS)


def positive(rng):
    kind = rng.randrange(8)
    v = pick_verb(rng)
    o = rng.choice(OBJECTS)
    if kind == 0:  # simple present
        h = rng.choice(PERSONS)
        return f"{np(rng, h)} {v[1]} {object_np(rng, o)}.", [(h, v[0], o)]
    if kind == 1:  # progressive
        h = rng.choice(PERSONS)
        return f"{np(rng, h)} is {v[2]} {object_np(rng, o)}", [(h, v[0], o)]
    if kind == 2:  # past with trailing place
        h = rng.choice(PERSONS)
        return f"{np(rng, h)} {v[3]} {object_np(rng, o)} on the {rng.choice(PLACES)}.", [(h, v[0], o)]
    if kind == 3:  # plural subject
        h = rng.choice(PLURAL_PERSONS)
        return f"{rng.choice(['two', 'some', 'the'])} {h} are {v[2]} {object_np(rng, o)}", [(h, v[0], o)]
    if kind == 4:  # coordinated subjects
        h1, h2 = rng.sample(PERSONS, 2)
        return f"a {h1} and a {h2} {v[0]} {object_np(rng, o)}", [(h1, v[0], o), (h2, v[0], o)]
    if kind == 5:  # coordinated predicates
        h = rng.choice(PERSONS)
        v2 = pick_verb(rng)
        o2 = rng.choice(OBJECTS)
        return (f"{np(rng, h)} {v[1]} {object_np(rng, o)} and {v2[1]} {object_np(rng, o2)}",
                [(h, v[0], o), (h, v2[0], o2)])
    if kind == 6:  # subject with a prepositional modifier
        h = rng.choice(PERSONS)
        return (f"{np(rng, h)} in {np(rng, rng.choice(['hat', 'jacket', 'dress', 'shirt']))} "
                f"{v[1]} {object_np(rng, o)}", [(h, v[0], o)])
    h = rng.choice(PERSONS)  # existential
    return f"there is a {h} {v[2]} {object_np(rng, o)}", [(h, v[0], o)]


def negative(rng):
    kind = rng.randrange(4)
    if kind == 0:  # subject is not a person
        v = pick_verb(rng)
        return f"{np(rng, rng.choice(NON_PERSONS))} {v[1]} {object_np(rng, rng.choice(OBJECTS))}"
    if kind == 1:  # no verb
        prep = rng.choice(["on", "in", "near"])
        return f"{np(rng, rng.choice(PERSONS))} {prep} the {rng.choice(PLACES)}"
    if kind == 2:  # verb without object
        return f"{np(rng, rng.choice(PERSONS))} is {rng.choice(['sleeping', 'running', 'smiling'])}."
    return f"{np(rng, rng.choice(OBJECTS))} on the {rng.choice(PLACES)}"


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


def captions(rng, n):
    caps, expected = [], []
    for i in range(n):
        cid = f"cap{i:03d}"
        if rng.random() < 0.75:
            text, trips = positive(rng)
        else:
            text, trips = negative(rng), []
        if rng.random() < 0.3:
            text = text[0].upper() + text[1:]
        caps.append({"id": cid, "text": text})
        expected.append({"id": cid, "triplets": [list(t) for t in trips]})
    return caps, expected


def triplets(rng, n):
    verbs = [v[0] for v in VERBS + PARTICLE_VERBS]
    combos = [(h, v, o) for h in PERSONS + PLURAL_PERSONS for v in verbs for o in OBJECTS]
    rows = []
    for k, (h, v, o) in enumerate(rng.sample(combos, n)):
        rows.append({"caption_id": f"t{k:04d}", "human": h, "verb": v, "object": o})
    return rows


def main():
    rng = random.Random(0)
    caps, expected = captions(rng, 200)
    write_jsonl("captions_200.jsonl", caps)
    write_jsonl("captions_200_expected.jsonl", expected)
    write_jsonl("triplets_1000.jsonl", triplets(rng, 1000))
    filtered = [
        {"id": "ex0", "text": "a man drives a car"},
        {"id": "ex1", "text": "car runs on the road"},
        {"id": "ex2", "text": "a man on the road"},
    ]
    write_jsonl("filter_examples.jsonl", filtered)
    write_jsonl("filter_examples_expected.jsonl", [
        {"id": "ex0", "triplets": [["man", "drive", "car"]]},
        {"id": "ex1", "triplets": []},
        {"id": "ex2", "triplets": []},
    ])


if __name__ == "__main__":
    main()
