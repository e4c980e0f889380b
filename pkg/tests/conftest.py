from hypothesis import settings

# statistical assertions must not depend on the hypothesis run seed
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")
