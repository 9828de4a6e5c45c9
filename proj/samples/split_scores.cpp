// Split a set of per-sample scores into clean and noisy with a 2-D mixture.
// Reads "id,accuracy,scd" rows from stdin (no header) and prints the noisy ids.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hardnoise/partition.hpp"

int main() {
    using namespace hardnoise;
    std::vector<SampleId> ids;
    std::vector<double> acc, scd;
    for (std::string line; std::getline(std::cin, line);) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string a, b, c;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, c, ',');
        ids.push_back(std::stoll(a));
        acc.push_back(std::stod(b));
        scd.push_back(std::stod(c));
    }
    if (ids.size() < 4) {
        std::cerr << "need at least 4 rows of id,accuracy,scd\n";
        return 1;
    }
    const auto p = partition_gmm2d(ids, acc, scd, Polarity::low_is_noisy, Polarity::high_is_noisy, 2);
    std::cout << "clean " << p.clean.size() << ", noisy " << p.noisy.size() << "\n";
    for (auto id : p.noisy) std::cout << id << "\n";
}
