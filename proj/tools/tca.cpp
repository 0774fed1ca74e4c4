#include "tca/commands.hpp"

int main(int argc, char** argv)
{
    return tca::cli::run(argc, argv);
}
