"""BlindQE - Services Package"""
