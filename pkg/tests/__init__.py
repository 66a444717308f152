# Empty init file for tests
