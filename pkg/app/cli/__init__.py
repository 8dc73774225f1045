"""BlindQE - Command-Line Package"""
