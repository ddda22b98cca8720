"""String shaping helpers: slugs, truncation, initials. No known defects."""


def slugify(text):
    """Lowercase `text` and join its alphanumeric runs with single hyphens."""
    words = []
    current = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            words.append("".join(current))
            current = []
    if current:
        words.append("".join(current))
    return "-".join(words)


def truncate(text, limit):
    """Shorten `text` to at most `limit` characters, ellipsis included."""
    if limit < 0:
        raise ValueError("limit must be >= 0")
    if len(text) <= limit:
        return text
    if limit <= 3:
        return text[:limit]
    return text[: limit - 3] + "..."


def initials(name):
    """Uppercase first letters of the whitespace-separated words in `name`."""
    parts = name.split()
    return "".join(part[0].upper() for part in parts)
