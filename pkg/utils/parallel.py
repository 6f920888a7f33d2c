import concurrent.futures

from tqdm import tqdm


def run_parallel(func, items, threads=1, desc=None, silent=False, debug=False):
    """
    Apply func to every item on a thread pool and return results in item order.

    Rows of a layer are independent work items; numpy releases the GIL inside
    its kernels, so threads give real overlap on the per-row linear algebra.

    Args:
        func (callable): Work function taking one item
        items (list): Work items
        threads (int): Worker count (1 runs inline)
        desc (str): Progress bar label
        silent (bool): Hide the progress bar
        debug (bool): Print scheduling details

    Returns:
        list: func(item) for every item, in input order
    """
    items = list(items)
    results = [None] * len(items)
    show_progress = not silent and desc is not None and len(items) > 1

    if debug:
        print(f"DEBUG: Running {len(items)} tasks on {threads} thread(s)")

    if threads <= 1 or len(items) <= 1:
        iterator = tqdm(items, desc=desc, leave=False) if show_progress else items
        for i, item in enumerate(iterator):
            results[i] = func(item)
        return results

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(func, item): i for i, item in enumerate(items)}
        completed = concurrent.futures.as_completed(futures)
        if show_progress:
            completed = tqdm(completed, total=len(futures), desc=desc, leave=False)
        for future in completed:
            # Re-raise the first worker failure in the caller
            results[futures[future]] = future.result()
    return results
