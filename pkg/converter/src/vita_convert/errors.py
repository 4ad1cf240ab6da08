class ConvertError(Exception):
    """Export or packing failed; the message names the offending item."""
