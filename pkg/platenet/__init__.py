class PlatenetError(Exception):
    pass
