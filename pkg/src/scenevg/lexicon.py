"""Closed vocabularies of the synthetic world.

The generator draws from these lists; the heuristic head finder uses the
noun and adjective sets as its lexicon.
"""

COLORS = {
    "red": (214, 39, 40),
    "green": (44, 160, 44),
    "blue": (31, 119, 180),
    "yellow": (240, 210, 30),
    "purple": (148, 103, 189),
    "orange": (255, 127, 14),
    "pink": (247, 129, 191),
    "black": (30, 30, 30),
}

# object noun -> drawn shape
CATEGORIES = {
    "cup": "circle",
    "box": "square",
    "hat": "triangle",
    "kite": "diamond",
}

GENERIC_NOUNS = ("item", "thing", "belonging", "object")

NAMES = (
    "Jake", "Mia", "Liam", "Emma", "Noah", "Ava", "Omar", "Zoe", "Ivan", "Lena",
    "Ravi", "Nora", "Hugo", "Ella", "Finn", "Ruby", "Theo", "Iris", "Leo", "Maya",
)

PROFESSIONS = (
    "doctor", "teacher", "baker", "pilot", "farmer",
    "painter", "lawyer", "singer", "nurse", "chef",
)

RELATIONS = ("colleague", "friend", "neighbor", "cousin", "boss", "partner")

EMOTIONS = ("happy", "tired", "nervous", "calm", "excited", "worried")
HOBBIES = ("chess", "tennis", "jazz", "poetry", "gardening", "hiking")
CITIES = ("Paris", "Lima", "Oslo", "Cairo", "Delhi", "Rome")
REMARKS = ("was a gift", "cost ten dollars", "came from a market", "is quite old")

NOUNS = frozenset(
    list(CATEGORIES) + list(GENERIC_NOUNS) + list(PROFESSIONS) + list(RELATIONS)
    + ["man", "woman", "person", "people", "glass", "glasses", "cup", "table", "chair",
       "dog", "cat", "car", "bag", "bottle", "phone", "book", "shirt", "coat", "boy", "girl"]
)
ADJECTIVES = frozenset(list(COLORS) + ["big", "small", "old", "new", "tall", "short"])
