from hypothesis import settings

# property tests run the same examples every time so the suite is reproducible
settings.register_profile("deterministic", derandomize=True, print_blob=True)
settings.load_profile("deterministic")
