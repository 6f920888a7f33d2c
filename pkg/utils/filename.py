import os
import re
from datetime import datetime, timezone

UTC = timezone.utc


def sanitize_label(label):
    """
    Make a layer name or level label safe to use inside a filename.

    Args:
        label (str): Raw label such as '2:4' or 'blocks.0/fc1'

    Returns:
        str: Label with every character outside [A-Za-z0-9._-] replaced by '-'
    """
    cleaned = re.sub(r'[^A-Za-z0-9._-]', '-', str(label))
    return cleaned or 'unnamed'


def level_filename(layer, label, ext):
    """File name of one layer's compressed weights at one level, e.g. 'fc1__2-4.npy'."""
    return f"{sanitize_label(layer)}__{sanitize_label(label)}{ext}"


def get_unique_filename(base_filename, overwrite=False, debug=False):
    """
    Generate a unique filename, either by overwriting or adding a number suffix.
    Creates any necessary directories in the path.

    Args:
        base_filename (str): The original filename
        overwrite (bool): Whether to overwrite existing files
        debug (bool): Whether to show debug information

    Returns:
        str: The unique filename
    """
    directory = os.path.dirname(base_filename)
    if directory:
        if debug:
            print(f"Creating directory: {directory}")
        os.makedirs(directory, exist_ok=True)

    if overwrite or not os.path.exists(base_filename):
        return base_filename

    name, ext = os.path.splitext(base_filename)
    counter = 1
    while True:
        new_filename = f"{name}_{counter}{ext}"
        if not os.path.exists(new_filename):
            return new_filename
        counter += 1


def replace_filename_tokens(filename, tokens, debug=False):
    """
    Replace tokens in an output path with their corresponding values.

    Supported tokens: {layer}, {mode}, {sparsity}, {bits}, {date}, {time}, {datetime}.

    Args:
        filename (str): The path containing tokens
        tokens (dict): Token values ('layer', 'mode', 'sparsity', 'bits')
        debug (bool): Whether to show debug information

    Returns:
        str: Path with tokens replaced
    """
    token_patterns = {
        '{layer}': lambda t: sanitize_label(t.get('layer', '')),
        '{mode}': lambda t: sanitize_label(t.get('mode', '')),
        '{sparsity}': lambda t: f"{t['sparsity']:.4f}" if t.get('sparsity') is not None else '',
        '{bits}': lambda t: str(t.get('bits') or ''),
        '{date}': lambda t: datetime.now(UTC).strftime('%Y%m%d'),
        '{time}': lambda t: datetime.now(UTC).strftime('%H%M%S'),
        '{datetime}': lambda t: datetime.now(UTC).strftime('%Y%m%d_%H%M%S'),
    }

    result = filename
    for pattern, replacement_func in token_patterns.items():
        if pattern in result:
            replacement = replacement_func(tokens)
            if debug:
                print(f"Replacing {pattern} with {replacement}")
            result = result.replace(pattern, replacement)
    return result
