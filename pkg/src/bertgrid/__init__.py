"""Grid-based document representations (character, word, contextual word-piece)
for layout-aware invoice field extraction."""

__version__ = "0.1.0"
