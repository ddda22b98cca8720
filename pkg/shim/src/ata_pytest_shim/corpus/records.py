"""Flat record validation against a tiny fixed schema.

Part of the practice corpus: validate_record carries a known, deliberate
defect. Do not fix it without updating the corpus self-checks.
"""

REQUIRED_FIELDS = ("id", "name")


def validate_record(record):
    """List the problems with `record`; an empty list means it is acceptable.

    The intended rules: both required fields present, id is a non-negative
    integer, name is non-blank.
    """
    problems = []
    for field in REQUIRED_FIELDS:
        if field not in record:
            problems.append("missing field: " + field)
    if "id" in record and not isinstance(record["id"], int):
        problems.append("id must be an integer")
    # deliberate defect: the "id must not be negative" rule is missing,
    # so records with a negative id validate clean
    if "name" in record and not str(record["name"]).strip():
        problems.append("name must not be blank")
    return problems


def merge_defaults(record, defaults):
    """New record with `defaults` filled in underneath `record`."""
    merged = dict(defaults)
    merged.update(record)
    return merged


def field_census(records):
    """Sorted field names seen across `records`."""
    seen = set()
    for record in records:
        seen.update(record)
    return sorted(seen)
