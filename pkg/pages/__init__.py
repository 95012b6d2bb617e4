"""
Pages of the report viewer.
"""

from . import reports, volumes

PAGES_CONFIG = {
    "Reports": {
        "module": reports,
        "icon": "📋",
        "description": "Cohort metrics, volume agreement and the post-processing ablation",
    },
    "Volumes": {
        "module": volumes,
        "icon": "🫀",
        "description": "Slice viewer for images, label maps and entropy maps",
    },
}


def get_page_module(page_name):
    """
    Module of a page.

    Args:
        page_name (str): Page name

    Returns:
        module: Page module, or None for unknown names
    """
    page_info = PAGES_CONFIG.get(page_name)
    return page_info["module"] if page_info else None


def get_page_list():
    return list(PAGES_CONFIG.keys())
