from .biasctl.cli import main_exit

main_exit()
