import sys; from dgsyolo.cli import main; sys.exit(main())
