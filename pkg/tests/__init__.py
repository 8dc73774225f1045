"""BlindQE - Tests Package"""
