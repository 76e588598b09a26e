from camsplat.cli import main

main()
