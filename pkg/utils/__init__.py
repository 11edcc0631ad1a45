# Utils package for the pilot-wave laboratory
