"""BlindQE - Pipeline Package"""
