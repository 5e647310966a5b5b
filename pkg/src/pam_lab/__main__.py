from .experiments_cli import main

main()
