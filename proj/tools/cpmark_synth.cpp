// Writes a small synthetic host corpus plus badge images.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cpmark/synth.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generate a synthetic corpus: <out>/train, <out>/test, <out>/badges"};
    std::string out;
    cpmark::synth::CorpusSpec spec;
    app.add_option("--out", out, "Output directory")->required();
    app.add_option("--train", spec.train, "Number of training images");
    app.add_option("--test", spec.test, "Number of test images");
    app.add_option("--side", spec.side, "Image side in pixels");
    app.add_option("--badges", spec.badges, "Number of badges");
    app.add_option("--seed", spec.seed, "Seed");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    try {
        cpmark::synth::write_corpus(out, spec);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cout << out << "\n";
    return 0;
}
