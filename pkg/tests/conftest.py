import hypothesis

# derandomized so CI failures reproduce; property tests stay cheap
hypothesis.settings.register_profile(
    "suite", derandomize=True, deadline=None, max_examples=50)
hypothesis.settings.load_profile("suite")
