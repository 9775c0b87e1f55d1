import { defineConfig } from "vite";

export default defineConfig({
  base: "/app/",
  build: { outDir: "dist" },
  server: {
    proxy: {
      "/projects": "http://127.0.0.1:8040",
      "/palette": "http://127.0.0.1:8040",
      "/healthz": "http://127.0.0.1:8040",
    },
  },
});
