"""
CaRe Segmentation Reports - Streamlit viewer over evaluation reports and volumes.
Read-only: training and prediction run from the careseg command line.
"""
import logging

import streamlit as st

from config.settings import APP_ICON, APP_TITLE, DATA_ROOT, DEBUG, LOG_FORMAT, LOG_LEVEL, PAGE_LAYOUT
from pages import PAGES_CONFIG, get_page_list, get_page_module

logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format=LOG_FORMAT)
logger = logging.getLogger(__name__)

st.set_page_config(
    page_title=APP_TITLE,
    page_icon=APP_ICON,
    layout=PAGE_LAYOUT,
    initial_sidebar_state="expanded",
    menu_items=None,
)

st.markdown("""
<style>
    .main-header {
        background: linear-gradient(90deg, #1E3A8A 0%, #DC2626 100%);
        padding: 1.5rem 2rem;
        border-radius: 1rem;
        color: white;
        margin-bottom: 1.5rem;
    }
    .main-header h1 { margin: 0; color: white; font-weight: 600; }
    .main-header p { margin: 0; color: #f1f5f9; }
    [data-testid="stSidebarNav"] {display: none !important;}
</style>
""", unsafe_allow_html=True)


def initialize_session_state():
    if 'current_page' not in st.session_state:
        st.session_state.current_page = get_page_list()[0]


def render_sidebar():
    """Render the sidebar with navigation."""
    with st.sidebar:
        st.markdown(f"## {APP_ICON} {APP_TITLE}")
        st.markdown("---")
        for page_name, info in PAGES_CONFIG.items():
            is_active = st.session_state.current_page == page_name
            if st.button(
                f"{info['icon']} {page_name}",
                key=f"nav_{page_name}",
                type="primary" if is_active else "secondary",
                use_container_width=True,
            ):
                if not is_active:
                    st.session_state.current_page = page_name
                    st.rerun()
        st.markdown("---")
        st.caption(f"Data root: `{DATA_ROOT}`")


def render_main_content():
    current_page = st.session_state.current_page
    info = PAGES_CONFIG.get(current_page, {})
    st.markdown(f"""
    <div class="main-header">
        <h1>{info.get('icon', '📄')} {current_page}</h1>
        <p>{info.get('description', '')}</p>
    </div>
    """, unsafe_allow_html=True)

    module = get_page_module(current_page)
    if module is None:
        st.error(f"Page not found: {current_page}")
        return
    try:
        module.render()
    except Exception as e:
        st.error(f"Unexpected error on {current_page}: {e}")
        logger.error(f"Page {current_page} failed: {e}", exc_info=True)
        if DEBUG:
            st.exception(e)


def main():
    initialize_session_state()
    render_sidebar()
    render_main_content()


if __name__ == "__main__":
    main()
