import { defineConfig } from "vitest/config";

export default defineConfig({
  resolve: {
    // Source files import each other with .js extensions so the tsc
    // output runs unbundled in a browser; map those back to the .ts
    // sources when vitest resolves them.
    alias: [{ find: /^(\.{1,2}\/.*)\.js$/, replacement: "$1" }],
  },
  test: {
    environment: "node",
    // Two of the suites spawn a real `crowdspec serve` child process;
    // run files one at a time and give the fleet time to finish.
    fileParallelism: false,
    testTimeout: 30000,
    hookTimeout: 45000,
  },
});
