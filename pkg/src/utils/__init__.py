# Configuration and exception hierarchy
