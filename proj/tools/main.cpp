#include "exoc/app.hpp"

int main(int argc, char** argv) { return exoc::app::run(argc, argv); }
