#!/usr/bin/env python3
"""Generate the bundled character-LM corpus.

Writes ~1 MB of deterministic, original English-like prose to
src/ibnorm/assets/corpus.txt. The text is built from fixed word lists and
sentence templates with a seeded RNG, so the file is reproducible and carries
no third-party rights. Run from the repository root:

    python3 tools/make_corpus.py
"""

import random
from pathlib import Path

TARGET_BYTES = 1_050_000
SEED = 20240911

NOUNS = """
river stone garden lantern harbor meadow mountain valley window ladder
traveler miller weaver sailor carpenter gardener teacher painter fisherman
shepherd baker smith farmer neighbor stranger child brother sister friend
morning evening winter summer autumn spring shadow sunlight rain snow wind
storm cloud star moon field forest orchard village market bridge tower mill
road path gate wall roof cellar attic kitchen table chair basket kettle loaf
candle letter journal map compass rope sail anchor net oar barrel wagon cart
horse ox goat sheep crow sparrow heron owl fox hare badger otter salmon trout
bee clover barley wheat oat apple pear plum cherry walnut chestnut willow oak
birch pine cedar moss fern reed rush bank shore island cliff cave spring well
fountain ditch hedge fence furrow seed harvest granary festival song story
riddle promise bargain journey errand lesson custom habit remedy tool hammer
chisel plane saw needle thread cloth wool linen leather clay brick mortar
"""

ADJECTIVES = """
quiet small old young broad narrow steep gentle patient careful clever plain
bright pale dark heavy light warm cold damp dry rough smooth hollow solid
distant nearby early late slow swift steady restless cheerful weary thoughtful
curious cautious generous stubborn honest humble proud tidy crooked straight
green grey golden silver amber russet faded worn fresh ripe bitter sweet
salty mild fierce calm foggy frosty rainy sunny windy silent noisy crowded
empty full ancient familiar strange ordinary
"""

VERBS_T = """
carried watched mended gathered measured followed crossed repaired counted
borrowed lifted planted trimmed traded painted sharpened bundled stacked
cleared dried salted weighed wrapped fetched delivered studied copied signed
remembered forgot described promised taught showed offered shared divided
"""

VERBS_I = """
rested waited listened wandered paused hurried slept stumbled whistled sang
laughed worried hesitated agreed nodded shrugged smiled frowned recovered
returned departed arrived lingered settled

"""

ADVERBS = """
slowly quickly quietly carefully patiently early late often rarely together
alone again finally almost nearly somewhere upstream downhill northward
gladly reluctantly evenly roughly barely
"""

PLACES = """
by the river
near the bridge
at the market
behind the mill
beyond the hedge
under the willow
along the shore
across the valley
beside the well
in the orchard
on the hillside
at the crossroads
near the harbor
inside the barn
past the old gate
through the birch wood
along the towpath
below the cliff
"""

TIMES = """
before dawn
after the rain
at first light
toward evening
in late autumn
during the thaw
after the harvest
on market day
in the third week
all winter
by midsummer
when the fog lifted
once the frost broke
while the kettle warmed
"""


def _words(block):
    return [w for w in block.split() if w.isascii() and w.isalpha()]


def _phrases(block):
    return [" ".join(line.split()) for line in block.strip().splitlines() if line.strip()]


def _zipf_choice(rng, items):
    # mild frequency skew so common words dominate like natural text
    n = len(items)
    r = rng.random()
    idx = int(n * r * r)
    return items[min(idx, n - 1)]


def make_sentence(rng, nouns, adjs, vt, vi, advs, places, times):
    def np_():
        det = rng.choice(["the", "the", "the", "a", "one", "that", "every", "her", "his"])
        if rng.random() < 0.45:
            return f"{det} {_zipf_choice(rng, adjs)} {_zipf_choice(rng, nouns)}"
        return f"{det} {_zipf_choice(rng, nouns)}"

    kind = rng.random()
    if kind < 0.35:
        s = f"{np_()} {_zipf_choice(rng, vt)} {np_()}"
    elif kind < 0.6:
        s = f"{np_()} {_zipf_choice(rng, vi)} {rng.choice(places)}"
    elif kind < 0.75:
        s = f"{rng.choice(times)}, {np_()} {_zipf_choice(rng, vi)}"
    elif kind < 0.9:
        s = f"{np_()} {_zipf_choice(rng, vt)} {np_()} {rng.choice(places)}"
    else:
        s = (f"{np_()} {_zipf_choice(rng, vi)} {_zipf_choice(rng, advs)}, "
             f"and {np_()} {_zipf_choice(rng, vi)} {rng.choice(times)}")
    if rng.random() < 0.12:
        s += f" {_zipf_choice(rng, advs)}"
    end = "?" if rng.random() < 0.04 else "."
    return s[0].upper() + s[1:] + end


def main():
    rng = random.Random(SEED)
    nouns = _words(NOUNS)
    adjs = _words(ADJECTIVES)
    vt = _words(VERBS_T)
    vi = _words(VERBS_I)
    advs = _words(ADVERBS)
    places = _phrases(PLACES)
    times = _phrases(TIMES)

    out = Path(__file__).resolve().parents[1] / "src" / "ibnorm" / "assets" / "corpus.txt"
    out.parent.mkdir(parents=True, exist_ok=True)

    parts = []
    size = 0
    while size < TARGET_BYTES:
        n_sent = rng.randint(3, 7)
        para = " ".join(
            make_sentence(rng, nouns, adjs, vt, vi, advs, places, times)
            for _ in range(n_sent)
        )
        parts.append(para)
        size += len(para) + 2
    text = "\n\n".join(parts) + "\n"
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out} ({len(text)} bytes, {len(set(text))} distinct chars)")


if __name__ == "__main__":
    main()
