"""BlindQE - Blind-QP Quality Enhancement"""
