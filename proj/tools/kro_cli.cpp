#include "kro/harness.hpp"

int main( int argc, char **argv )
{
    return kro::cli( argc, argv );
}
